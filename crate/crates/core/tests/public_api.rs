use thattn_core::attention::{
    attention, init_params, init_params_with, AttentionDims, AttentionParams, InitOptions,
    MultiHeadParams, Variant,
};
use thattn_core::cost::{
    format_sci, multiplies_closed_form, multiplies_schedule, parameter_count, CostQuery,
};
use thattn_core::rng::{normal_init, Rng};
use thattn_core::tensor::{axes, einsum};
use thattn_core::Tensor;

#[test]
fn einsum_matches_a_hand_written_matmul() {
    let a = Tensor::from_fn(axes(&[("i", 3), ("k", 4)]), |ix| {
        (ix[0] * 4 + ix[1]) as f64 - 5.0
    })
    .unwrap();
    let b = Tensor::from_fn(axes(&[("k", 4), ("j", 2)]), |ix| {
        0.5 * ix[0] as f64 - ix[1] as f64
    })
    .unwrap();
    let c = einsum(&[(&a, &["i", "k"]), (&b, &["k", "j"])], &["i", "j"]).unwrap();
    for i in 0..3 {
        for j in 0..2 {
            let want: f64 = (0..4).map(|k| a.get(&[i, k]) * b.get(&[k, j])).sum();
            assert_eq!(c.get(&[i, j]), want);
        }
    }
}

// Talking-heads rows of the published head-count sweep: (heads, d_k = d_v,
// parameters, multiplies rounded to four significant digits).
#[test]
fn talking_heads_counts_match_published_table() {
    let rows = [
        (6, 128, 2359368, "1.629·10⁹"),
        (12, 64, 2359584, "1.686·10⁹"),
        (48, 16, 2363904, "2.819·10⁹"),
    ];
    for (h, d, params, mults) in rows {
        let q = CostQuery::new(
            Variant::TalkingHeads,
            AttentionDims::with_width(512, 512, 768, d, d, h, h, h),
        );
        assert_eq!(parameter_count(&q), params, "h={h}");
        let closed = multiplies_closed_form(&q).unwrap();
        assert_eq!(format_sci(closed), mults, "h={h}");
        assert_eq!(multiplies_schedule(&q).unwrap().schedule_total, closed);
    }
}

fn inputs(dims: &AttentionDims, rng: &mut Rng) -> (Tensor, Tensor) {
    (
        normal_init(axes(&[("n", dims.n), ("d_X", dims.d_x)]), 1.0, rng).unwrap(),
        normal_init(axes(&[("m", dims.m), ("d_M", dims.d_m)]), 1.0, rng).unwrap(),
    )
}

#[test]
fn noise_free_talking_heads_reduces_to_multi_head() {
    let dims = AttentionDims::with_width(5, 7, 6, 3, 2, 4, 4, 4);
    let rng = Rng::new(3);
    let opts = InitOptions {
        projection_noise_std: 0.0,
    };
    let th = match init_params_with(Variant::TalkingHeads, &dims, &rng, opts).unwrap() {
        AttentionParams::TalkingHeads(p) => p,
        other => panic!("got {}", other.variant()),
    };
    let mh = AttentionParams::MultiHead(MultiHeadParams {
        p_q: th.p_q.clone(),
        p_k: th.p_k.clone(),
        p_v: th.p_v.clone(),
        p_o: th.p_o.clone(),
    });
    let (x, m) = inputs(&dims, &mut rng.fork("inputs"));
    let a = attention(&x, &m, &AttentionParams::TalkingHeads(th), false).unwrap();
    let b = attention(&x, &m, &mh, false).unwrap();
    assert!(a.y.max_abs_diff(&b.y).unwrap() <= 1e-12);
}

#[test]
fn attention_weights_are_row_stochastic_for_every_variant() {
    let dims = AttentionDims::with_width(4, 6, 8, 2, 3, 3, 3, 3);
    for variant in [Variant::MultiHead, Variant::TalkingHeads, Variant::Gbma] {
        let rng = Rng::new(9);
        let params = init_params(variant, &dims, &rng).unwrap();
        let (x, m) = inputs(&dims, &mut rng.fork("inputs"));
        let out = attention(&x, &m, &params, true).unwrap();
        let w = out.trace.expect("trace requested").w;
        let names = w.names();
        let keep: Vec<&str> = names.iter().copied().filter(|a| *a != "m").collect();
        assert_eq!(keep.len(), names.len() - 1);
        let sums = einsum(&[(&w, &names)], &keep).unwrap();
        for s in sums.data() {
            assert!((s - 1.0).abs() <= 1e-12, "{variant}: row sums to {s}");
        }
    }
}
