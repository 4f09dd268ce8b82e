use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use thattn_core::attention::{
    attend, attention, init_params, AttentionDims, GeneratorSet, Layout, Variant,
};
use thattn_core::autograd::Tape;
use thattn_core::cost::{multiplies_schedule, presets};
use thattn_core::rng::{normal_init, Rng};
use thattn_core::tensor::{axes, einsum};

fn contraction(c: &mut Criterion) {
    let mut rng = Rng::new(1);
    let a = normal_init(axes(&[("n", 64), ("d", 64)]), 1.0, &mut rng).unwrap();
    let b = normal_init(axes(&[("d", 64), ("k", 8), ("h", 8)]), 1.0, &mut rng).unwrap();
    c.bench_function("einsum n,d x d,k,h -> n,k,h (64x64x8x8)", |bench| {
        bench.iter(|| {
            einsum(
                &[(black_box(&a), &["n", "d"]), (&b, &["d", "k", "h"])],
                &["n", "k", "h"],
            )
            .unwrap()
        })
    });
}

fn forward(c: &mut Criterion) {
    let dims = AttentionDims::with_width(32, 32, 64, 8, 8, 8, 8, 8);
    let rng = Rng::new(2);
    let mut r = rng.fork("inputs");
    let x = normal_init(axes(&[("n", 32), ("d_X", 64)]), 1.0, &mut r).unwrap();
    let m = normal_init(axes(&[("m", 32), ("d_M", 64)]), 1.0, &mut r).unwrap();
    let mut group = c.benchmark_group("forward n=m=32 d=64 heads=8");
    for variant in [
        Variant::MultiHead,
        Variant::TalkingHeads,
        Variant::Dynamic(GeneratorSet::ALL),
        Variant::Gbma,
    ] {
        let p = init_params(variant, &dims, &rng).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(variant), &p, |bench, p| {
            bench.iter(|| attention(black_box(&x), &m, p, false).unwrap())
        });
    }
    group.finish();
}

fn backward(c: &mut Criterion) {
    let dims = AttentionDims::with_width(16, 16, 32, 4, 4, 4, 4, 4);
    let rng = Rng::new(3);
    let mut r = rng.fork("inputs");
    let x = normal_init(axes(&[("n", 16), ("d_X", 32)]), 1.0, &mut r).unwrap();
    let m = normal_init(axes(&[("m", 16), ("d_M", 32)]), 1.0, &mut r).unwrap();
    let p = init_params(Variant::TalkingHeads, &dims, &rng).unwrap();
    c.bench_function("talking-heads forward+backward n=m=16 d=32", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.leaf("X", x.clone());
            let mv = tape.leaf("M", m.clone());
            let pv = p
                .try_map(|name, t| Ok::<_, thattn_core::Error>(tape.leaf(name, t.clone())))
                .unwrap();
            let y = attend(&mut tape, Layout::default(), &xv, &mv, &pv)
                .unwrap()
                .y;
            let loss = tape.einsum("loss", &[(y, &["n", "d_Y"])], &[]).unwrap();
            tape.backward(loss).unwrap()
        })
    });
}

fn cost(c: &mut Criterion) {
    let table = presets::get("table1").unwrap();
    c.bench_function("schedule tally, table1 preset", |bench| {
        bench.iter(|| {
            table
                .iter()
                .map(|q| multiplies_schedule(black_box(q)).unwrap().schedule_total)
                .sum::<u64>()
        })
    });
}

criterion_group!(benches, contraction, forward, backward, cost);
criterion_main!(benches);
