//! Property suites behind `thattn verify`. Each suite is a pure function
//! returning one [`Check`] per property, with the worst error over its cases.

use std::fmt;

use thattn_core::attention::dot_product_attention;
use thattn_core::attention::{
    attend, attention, factor_to_gbma, gbma, init_params, multi_head_attention_concise,
    talking_heads_attention_concise, AttentionDims, AttentionParams, Generator, GeneratorSet,
    HybridKind, HybridParams, Layout, MultiHeadParams, TalkingHeadsParams, Variant,
};
use thattn_core::autograd::{check_gradients, Tape, FD_STEP};
use thattn_core::cost::{multiplies_closed_form, multiplies_schedule, CostQuery};
use thattn_core::rng::{normal_init, Rng};
use thattn_core::tensor::{self, axes};
use thattn_core::{Result, Tensor};

use crate::oracle;

pub const SUITES: [&str; 6] = [
    "einsum-oracle",
    "invariants",
    "reduction",
    "gbma",
    "gradient",
    "cost-parity",
];

#[derive(Clone, Debug, Default)]
pub struct VerifyOptions {
    /// Run only suites whose name contains this string.
    pub filter: Option<String>,
    /// Fault injection: scale the gradient delivered to every `P_l`.
    pub corrupt_pl_adjoint: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Check {
    pub suite: &'static str,
    pub property: String,
    pub cases: usize,
    pub worst_error: f64,
    pub tolerance: f64,
    /// Set when a case errored instead of producing a number.
    pub failure: Option<String>,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.worst_error <= self.tolerance
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed() { "PASS" } else { "FAIL" };
        write!(
            f,
            "{status}  {:<13} {:<60} worst {:.3e}  tol {:.0e}  ({} cases)",
            self.suite, self.property, self.worst_error, self.tolerance, self.cases
        )?;
        if let Some(msg) = &self.failure {
            write!(f, "  error: {msg}")?;
        }
        Ok(())
    }
}

/// Folds per-case errors into one check; an `Err` case fails the check.
fn check(
    suite: &'static str,
    property: impl Into<String>,
    tolerance: f64,
    cases: usize,
    mut case: impl FnMut(usize) -> Result<f64>,
) -> Check {
    let mut worst: f64 = 0.0;
    let mut failure = None;
    for i in 0..cases {
        match case(i) {
            Ok(e) if e.is_nan() => {
                failure = Some(format!("case {i}: NaN error"));
                break;
            }
            Ok(e) => worst = worst.max(e),
            Err(e) => {
                failure = Some(format!("case {i}: {e}"));
                break;
            }
        }
    }
    Check {
        suite,
        property: property.into(),
        cases,
        worst_error: worst,
        tolerance,
        failure,
    }
}

pub fn selected(filter: Option<&str>) -> Vec<&'static str> {
    SUITES
        .into_iter()
        .filter(|s| filter.is_none_or(|f| s.contains(f)))
        .collect()
}

/// Runs the selected suites concurrently; checks come back in suite order.
pub fn run(opts: &VerifyOptions) -> Vec<Check> {
    let names = selected(opts.filter.as_deref());
    std::thread::scope(|s| {
        let handles: Vec<_> = names
            .iter()
            .map(|&name| s.spawn(move || run_suite(name, opts)))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("suite panicked"))
            .collect()
    })
}

pub fn run_suite(name: &str, opts: &VerifyOptions) -> Vec<Check> {
    match name {
        "einsum-oracle" => einsum_oracle(),
        "invariants" => invariants(),
        "reduction" => reduction(),
        "gbma" => gbma_equivalence(),
        "gradient" => gradients(opts.corrupt_pl_adjoint),
        "cost-parity" => cost_parity(),
        other => panic!("unknown suite {other}"),
    }
}

// ---- instances ----------------------------------------------------------

/// Variant-legal random dims: n, m ≤ 6, widths ≤ 8, d_k, d_v ≤ 4, heads ≤ 4.
pub fn random_dims(variant: Variant, rng: &mut Rng) -> AttentionDims {
    let mut r = |hi: usize| 1 + rng.below(hi);
    let mut d = AttentionDims {
        n: r(6),
        m: r(6),
        d_x: r(8),
        d_m: r(8),
        d_y: r(8),
        d_k: r(4),
        d_v: r(4),
        h_k: r(4),
        h: r(4),
        h_v: r(4),
    };
    match variant {
        Variant::MultiHead => (d.h_k, d.h_v) = (d.h, d.h),
        Variant::LogitsOnly => d.h_v = d.h,
        Variant::WeightsOnly => d.h_k = d.h,
        _ => {}
    }
    d
}

/// Parameters with every entry drawn N(0, std²), so head projections are far
/// from identity and generators matter.
pub fn random_params(
    variant: Variant,
    dims: &AttentionDims,
    std: f64,
    rng: &Rng,
) -> Result<AttentionParams> {
    let template = init_params(variant, dims, rng)?;
    template
        .try_map(|name, t| normal_init(t.axes().to_vec(), std, &mut rng.fork(name).fork("dense")))
}

pub fn random_inputs(dims: &AttentionDims, rng: &Rng) -> Result<(Tensor, Tensor)> {
    let mut r = rng.fork("inputs");
    Ok((
        normal_init(axes(&[("n", dims.n), ("d_X", dims.d_x)]), 1.0, &mut r)?,
        normal_init(axes(&[("m", dims.m), ("d_M", dims.d_m)]), 1.0, &mut r)?,
    ))
}

/// Every variant, including each single dynamic generator and all four.
pub fn all_variants() -> Vec<Variant> {
    let mut v = vec![
        Variant::MultiHead,
        Variant::TalkingHeads,
        Variant::LogitsOnly,
        Variant::WeightsOnly,
    ];
    v.extend(Generator::ALL.map(|g| Variant::Dynamic(GeneratorSet::only(g))));
    v.push(Variant::Dynamic(GeneratorSet::ALL));
    v.push(Variant::Gbma);
    v
}

fn case_rng(suite: &str, property: &str, i: usize) -> Rng {
    Rng::new(0x7a1c)
        .fork(suite)
        .fork(property)
        .fork_index(i as u64)
}

fn as_multi_head(p: &TalkingHeadsParams) -> MultiHeadParams {
    MultiHeadParams {
        p_q: p.p_q.clone(),
        p_k: p.p_k.clone(),
        p_v: p.p_v.clone(),
        p_o: p.p_o.clone(),
    }
}

fn identity_projections(p: &mut TalkingHeadsParams) -> Result<()> {
    let (hk, h, hv) = (p.p_l.sizes()[0], p.p_l.sizes()[1], p.p_w.sizes()[1]);
    p.p_l = Tensor::eye("h_k", hk, "h", h)?;
    p.p_w = Tensor::eye("h", h, "h_v", hv)?;
    Ok(())
}

fn th(p: AttentionParams) -> TalkingHeadsParams {
    match p {
        AttentionParams::TalkingHeads(p) => p,
        _ => unreachable!("talking-heads parameters expected"),
    }
}

fn mh(p: AttentionParams) -> MultiHeadParams {
    match p {
        AttentionParams::MultiHead(p) => p,
        _ => unreachable!("multi-head parameters expected"),
    }
}

fn y_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.max_abs_diff(b)
}

// ---- suites -------------------------------------------------------------

const EINSUM_PATTERNS: [(&[&str], &str); 7] = [
    (&["ab", "bc"], "ac"),
    (&["abc", "cd", "db"], "a"),
    (&["ab", "ab"], ""),
    (&["a", "b"], "ab"),
    (&["abc"], "ca"),
    (&["nd", "md", "mh"], "nh"),
    (&["abcd", "dc", "e"], "eb"),
];

fn einsum_oracle() -> Vec<Check> {
    const S: &str = "einsum-oracle";
    let mut out = vec![check(
        S,
        "random einsums vs brute-force summation",
        1e-12,
        70,
        |i| {
            let (inputs, output) = EINSUM_PATTERNS[i % EINSUM_PATTERNS.len()];
            let mut rng = case_rng(S, "einsum", i);
            let mut size = [0usize; 26];
            size.iter_mut().for_each(|s| *s = 1 + rng.below(4));
            let split = |w: &str| w.chars().map(|c| c.to_string()).collect::<Vec<_>>();
            let labels: Vec<Vec<String>> = inputs.iter().map(|w| split(w)).collect();
            let out_labels = split(output);
            let tensors = labels
                .iter()
                .map(|ls| {
                    let spec: Vec<(&str, usize)> = ls
                        .iter()
                        .map(|l| (l.as_str(), size[(l.as_bytes()[0] - b'a') as usize]))
                        .collect();
                    normal_init(axes(&spec), 1.0, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<Vec<&str>> = labels
                .iter()
                .map(|ls| ls.iter().map(String::as_str).collect())
                .collect();
            let ops: Vec<(&Tensor, &[&str])> = tensors
                .iter()
                .zip(&refs)
                .map(|(t, l)| (t, l.as_slice()))
                .collect();
            let outs: Vec<&str> = out_labels.iter().map(String::as_str).collect();
            let got = tensor::einsum(&ops, &outs)?;
            let want = oracle::einsum(&ops, &outs);
            Ok(got
                .data()
                .iter()
                .zip(&want)
                .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
        },
    )];

    out.push(check(S, "dot-product attention vs loops", 1e-12, 20, |i| {
        let mut rng = case_rng(S, "dot", i);
        let (n, m, d) = (1 + rng.below(6), 1 + rng.below(6), 1 + rng.below(8));
        let x = normal_init(axes(&[("n", n), ("d", d)]), 1.0, &mut rng)?;
        let mm = normal_init(axes(&[("m", m), ("d", d)]), 1.0, &mut rng)?;
        let y = dot_product_attention(&x, &mm)?;
        Ok(oracle::max_abs_diff(
            &oracle::to_rows(&y),
            &oracle::dot_product(&x, &mm),
        ))
    }));

    for variant in all_variants() {
        out.push(check(
            S,
            format!("{variant} forward vs loops"),
            1e-12,
            20,
            |i| {
                let rng = case_rng(S, &variant.to_string(), i);
                let dims = random_dims(variant, &mut rng.fork("dims"));
                let p = random_params(variant, &dims, 0.5, &rng)?;
                let (x, m) = random_inputs(&dims, &rng)?;
                let y = attention(&x, &m, &p, false)?.y;
                Ok(oracle::max_abs_diff(
                    &oracle::to_rows(&y),
                    &oracle::attention(&x, &m, &p).y,
                ))
            },
        ));
    }

    // Dynamic on the smallest non-trivial shape: n = m = d = heads = 2.
    out.push(check(
        S,
        "dynamic (all generators) on 2x2x2 vs loops",
        1e-12,
        20,
        |i| {
            let rng = case_rng(S, "dynamic-2", i);
            let dims = AttentionDims::with_width(2, 2, 2, 2, 2, 2, 2, 2);
            let p = random_params(Variant::Dynamic(GeneratorSet::ALL), &dims, 1.0, &rng)?;
            let (x, m) = random_inputs(&dims, &rng)?;
            let y = attention(&x, &m, &p, false)?.y;
            Ok(oracle::max_abs_diff(
                &oracle::to_rows(&y),
                &oracle::attention(&x, &m, &p).y,
            ))
        },
    ));

    out.push(check(
        S,
        "concise multi-head = step-by-step",
        1e-12,
        20,
        |i| {
            let rng = case_rng(S, "concise-mh", i);
            let dims = random_dims(Variant::MultiHead, &mut rng.fork("dims"));
            let p = mh(random_params(Variant::MultiHead, &dims, 0.5, &rng)?);
            let (x, m) = random_inputs(&dims, &rng)?;
            let a = multi_head_attention_concise(&x, &m, &p)?;
            let b = attention(&x, &m, &AttentionParams::MultiHead(p), false)?.y;
            y_diff(&a, &b)
        },
    ));
    out.push(check(
        S,
        "concise talking-heads = step-by-step",
        1e-12,
        20,
        |i| {
            let rng = case_rng(S, "concise-th", i);
            let dims = random_dims(Variant::TalkingHeads, &mut rng.fork("dims"));
            let p = th(random_params(Variant::TalkingHeads, &dims, 0.5, &rng)?);
            let (x, m) = random_inputs(&dims, &rng)?;
            let a = talking_heads_attention_concise(&x, &m, &p)?;
            let b = attention(&x, &m, &AttentionParams::TalkingHeads(p), false)?.y;
            y_diff(&a, &b)
        },
    ));
    out
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Result<Tensor> {
    Tensor::from_fn(t.axes().to_vec(), |i| {
        let mut j = i.to_vec();
        j[0] = perm[i[0]];
        t.get(&j)
    })
}

fn random_perm(len: usize, rng: &mut Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        p.swap(i, rng.below(i + 1));
    }
    p
}

fn invariants() -> Vec<Check> {
    const S: &str = "invariants";
    let mut out = Vec::new();
    for variant in all_variants() {
        let name = variant.to_string();
        let setup = |prop: &str, i: usize| -> Result<(Rng, AttentionParams, Tensor, Tensor)> {
            let rng = case_rng(S, &format!("{name}/{prop}"), i);
            let dims = random_dims(variant, &mut rng.fork("dims"));
            let p = random_params(variant, &dims, 0.5, &rng)?;
            let (x, m) = random_inputs(&dims, &rng)?;
            Ok((rng, p, x, m))
        };
        out.push(check(
            S,
            format!("{name}: weight rows sum to 1"),
            1e-12,
            20,
            |i| {
                let (_, p, x, m) = setup("sum", i)?;
                let w = attention(&x, &m, &p, true)?
                    .trace
                    .expect("trace requested")
                    .w;
                let w = w.permuted(&["n", "h", "m"])?;
                let rows = w.data().chunks(w.size_of("m")?);
                Ok(rows.fold(0.0, |e, r| e.max((r.iter().sum::<f64>() - 1.0).abs())))
            },
        ));
        out.push(check(
            S,
            format!("{name}: memory permutation invariance"),
            1e-12,
            20,
            |i| {
                let (mut rng, p, x, m) = setup("mem", i)?;
                let perm = random_perm(m.sizes()[0], &mut rng);
                let a = attention(&x, &m, &p, false)?.y;
                let b = attention(&x, &permute_rows(&m, &perm)?, &p, false)?.y;
                y_diff(&a, &b)
            },
        ));
        out.push(check(
            S,
            format!("{name}: query permutation equivariance"),
            1e-12,
            20,
            |i| {
                let (mut rng, p, x, m) = setup("query", i)?;
                let perm = random_perm(x.sizes()[0], &mut rng);
                let a = permute_rows(&attention(&x, &m, &p, false)?.y, &perm)?;
                let b = attention(&permute_rows(&x, &perm)?, &m, &p, false)?.y;
                y_diff(&a, &b)
            },
        ));
    }
    out
}

fn reduction() -> Vec<Check> {
    const S: &str = "reduction";
    // Square heads so that identity projections exist in both directions.
    let square = |rng: &Rng| random_dims(Variant::MultiHead, &mut rng.fork("dims"));
    let mut out = vec![check(
        S,
        "talking-heads with identity P_l, P_w = multi-head",
        1e-13,
        50,
        |i| {
            let rng = case_rng(S, "th", i);
            let dims = square(&rng);
            let mut p = th(random_params(Variant::TalkingHeads, &dims, 0.5, &rng)?);
            identity_projections(&mut p)?;
            let (x, m) = random_inputs(&dims, &rng)?;
            let a = attention(&x, &m, &AttentionParams::TalkingHeads(p.clone()), false)?.y;
            let b = attention(
                &x,
                &m,
                &AttentionParams::MultiHead(as_multi_head(&p)),
                false,
            )?
            .y;
            y_diff(&a, &b)
        },
    )];
    for kind in [HybridKind::LogitsOnly, HybridKind::WeightsOnly] {
        let label = match kind {
            HybridKind::LogitsOnly => "logits-only with identity P_l = multi-head",
            HybridKind::WeightsOnly => "weights-only with identity P_w = multi-head",
        };
        out.push(check(S, label, 1e-13, 50, |i| {
            let rng = case_rng(S, label, i);
            let dims = square(&rng);
            let base = mh(random_params(Variant::MultiHead, &dims, 0.5, &rng)?);
            let hybrid = HybridParams {
                kind,
                p_q: base.p_q.relabel(&["d_X", "d_k", "h_k"])?,
                p_k: base.p_k.relabel(&["d_M", "d_k", "h_k"])?,
                p_v: base.p_v.relabel(&["d_M", "d_v", "h_v"])?,
                p_o: base.p_o.relabel(&["d_Y", "d_v", "h_v"])?,
                projection: match kind {
                    HybridKind::LogitsOnly => Tensor::eye("h_k", dims.h, "h", dims.h)?,
                    HybridKind::WeightsOnly => Tensor::eye("h", dims.h, "h_v", dims.h)?,
                },
            };
            let (x, m) = random_inputs(&dims, &rng)?;
            let a = attention(&x, &m, &AttentionParams::Hybrid(hybrid), false)?.y;
            let b = attention(&x, &m, &AttentionParams::MultiHead(base), false)?.y;
            y_diff(&a, &b)
        }));
    }
    out.push(check(
        S,
        "dynamic with all-zero generators = talking-heads (exact)",
        0.0,
        50,
        |i| {
            let rng = case_rng(S, "dyn-zero", i);
            let dims = random_dims(Variant::TalkingHeads, &mut rng.fork("dims"));
            let mut p = match random_params(Variant::Dynamic(GeneratorSet::ALL), &dims, 0.5, &rng)?
            {
                AttentionParams::Dynamic(p) => p,
                _ => unreachable!(),
            };
            for g in [&mut p.p_xl, &mut p.p_ml, &mut p.p_xw, &mut p.p_mw]
                .into_iter()
                .flatten()
            {
                *g = Tensor::zeros(g.axes().to_vec())?;
            }
            let (x, m) = random_inputs(&dims, &rng)?;
            let a = attention(&x, &m, &AttentionParams::Dynamic(p.clone()), false)?.y;
            let b = attention(&x, &m, &AttentionParams::TalkingHeads(p.base), false)?.y;
            y_diff(&a, &b)
        },
    ));
    out.push(check(
        S,
        "noise-free talking-heads init = multi-head init",
        1e-13,
        20,
        |i| {
            use thattn_core::attention::{init_params_with, InitOptions};
            let rng = case_rng(S, "init", i);
            let dims = square(&rng);
            let opts = InitOptions {
                projection_noise_std: 0.0,
            };
            let p = th(init_params_with(Variant::TalkingHeads, &dims, &rng, opts)?);
            let (x, m) = random_inputs(&dims, &rng)?;
            let a = attention(&x, &m, &AttentionParams::TalkingHeads(p.clone()), false)?.y;
            let b = attention(
                &x,
                &m,
                &AttentionParams::MultiHead(as_multi_head(&p)),
                false,
            )?
            .y;
            y_diff(&a, &b)
        },
    ));
    out
}

fn gbma_equivalence() -> Vec<Check> {
    const S: &str = "gbma";
    let mut out = Vec::new();
    for variant in [
        Variant::MultiHead,
        Variant::TalkingHeads,
        Variant::LogitsOnly,
        Variant::WeightsOnly,
    ] {
        out.push(check(
            S,
            format!("gbma(factor({variant})) = {variant}"),
            1e-11,
            50,
            |i| {
                let rng = case_rng(S, &variant.to_string(), i);
                let dims = random_dims(variant, &mut rng.fork("dims"));
                let p = random_params(variant, &dims, 0.5, &rng)?;
                let (x, m) = random_inputs(&dims, &rng)?;
                let a = attention(&x, &m, &p, false)?.y;
                let b = gbma(&x, &m, &factor_to_gbma(&p)?, false)?.y;
                y_diff(&a, &b)
            },
        ));
    }
    out.push(check(S, "gbma forward vs loops", 1e-12, 50, |i| {
        let rng = case_rng(S, "loops", i);
        let dims = random_dims(Variant::Gbma, &mut rng.fork("dims"));
        let p = random_params(Variant::Gbma, &dims, 0.3, &rng)?;
        let (x, m) = random_inputs(&dims, &rng)?;
        let y = attention(&x, &m, &p, false)?.y;
        Ok(oracle::max_abs_diff(
            &oracle::to_rows(&y),
            &oracle::attention(&x, &m, &p).y,
        ))
    }));
    out
}

/// Relative finite-difference error over X, M and every parameter of
/// `params`, for a fixed non-symmetric weighting of the output.
pub fn gradient_error(
    params: &AttentionParams,
    x: &Tensor,
    m: &Tensor,
    corrupt_pl: Option<f64>,
) -> Result<f64> {
    let named = params.named();
    let mut inputs: Vec<(&str, &Tensor)> = vec![("X", x), ("M", m)];
    inputs.extend(named.iter().copied());
    let report = check_gradients(
        &inputs,
        |tape: &mut Tape, vars| {
            // `named` and `try_map` visit parameters in the same order.
            let mut k = 2;
            let hp = params.try_map(|name, _| {
                k += 1;
                let v = vars[k - 1];
                if let (Some(f), "P_l") = (corrupt_pl, name) {
                    tape.corrupt_adjoint(v, f);
                }
                Ok::<_, thattn_core::Error>(v)
            })?;
            let t = attend(tape, Layout::default(), &vars[0], &vars[1], &hp)?;
            let wts = Tensor::from_fn(tape.value(t.y).axes().to_vec(), |i| {
                1.0 + 0.1 * i[0] as f64 - 0.2 * i[1] as f64
            })?;
            let c = tape.constant("weights", wts);
            tape.einsum("loss", &[(t.y, &["n", "d_Y"]), (c, &["n", "d_Y"])], &[])
        },
        FD_STEP,
    )?;
    Ok(report.max_relative_error)
}

fn gradients(corrupt_pl: Option<f64>) -> Vec<Check> {
    const S: &str = "gradient";
    all_variants()
        .into_iter()
        .map(|variant| {
            check(
                S,
                format!("{variant}: d/dX, d/dM, d/dparams vs central differences"),
                1e-5,
                3,
                |i| {
                    let rng = case_rng(S, &variant.to_string(), i);
                    let mut r = rng.fork("dims");
                    let mut dims = random_dims(variant, &mut r);
                    // Tiny instances keep the finite-difference sweep quick.
                    dims.n = dims.n.min(3);
                    dims.m = dims.m.min(3);
                    dims.d_x = dims.d_x.min(3);
                    dims.d_m = dims.d_m.min(3);
                    dims.d_y = dims.d_y.min(3);
                    let p = random_params(variant, &dims, 0.5, &rng)?;
                    let (x, m) = random_inputs(&dims, &rng)?;
                    gradient_error(&p, &x, &m, corrupt_pl)
                },
            )
        })
        .collect()
}

fn cost_parity() -> Vec<Check> {
    const S: &str = "cost-parity";
    [
        Variant::MultiHead,
        Variant::TalkingHeads,
        Variant::LogitsOnly,
        Variant::WeightsOnly,
    ]
    .into_iter()
    .map(|variant| {
        check(
            S,
            format!("{variant}: closed form = schedule tally"),
            0.0,
            200,
            |i| {
                let mut rng = case_rng(S, &variant.to_string(), i);
                let mut r = |_: ()| 1 + rng.below(64);
                let mut d = AttentionDims {
                    n: r(()),
                    m: r(()),
                    d_x: r(()),
                    d_m: r(()),
                    d_y: 0,
                    d_k: r(()),
                    d_v: r(()),
                    h_k: r(()),
                    h: r(()),
                    h_v: r(()),
                };
                // The closed forms take d_Y = d_X.
                d.d_y = d.d_x;
                match variant {
                    Variant::MultiHead => (d.h_k, d.h_v) = (d.h, d.h),
                    Variant::LogitsOnly => d.h_v = d.h,
                    Variant::WeightsOnly => d.h_k = d.h,
                    _ => {}
                }
                let q = CostQuery::new(variant, d);
                let closed = multiplies_closed_form(&q)?;
                let tally = multiplies_schedule(&q)?.schedule_total;
                Ok(closed.abs_diff(tally) as f64)
            },
        )
    })
    .collect()
}
