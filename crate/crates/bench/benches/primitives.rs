use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, Criterion};
use lhecnn::tee::TeeService;
use lhecnn::{Evaluator, LheParams, OpMeter, Plaintext};

fn primitives(c: &mut Criterion) {
    let mut g = c.benchmark_group("primitives");
    for slots in [4096, 16384] {
        let tee = Arc::new(TeeService::with_seed(LheParams::new(slots, 8).unwrap(), 1));
        tee.attest_and_provision("bench");
        let ev = Evaluator::new(tee.public_key(), Arc::new(OpMeter::new()));
        let v: Vec<f64> = (0..slots).map(|i| (i % 17) as f64 * 0.1).collect();
        let a = ev.encrypt_slots(v.clone()).unwrap();
        let b = ev.encrypt_slots(v.iter().rev().copied().collect()).unwrap();
        let pt = Plaintext::new(v.clone());
        g.bench_function(format!("add/{slots}"), |bch| bch.iter(|| ev.add(black_box(&a), &b).unwrap()));
        g.bench_function(format!("mul/{slots}"), |bch| bch.iter(|| ev.mul(black_box(&a), &b).unwrap()));
        g.bench_function(format!("cmul/{slots}"), |bch| bch.iter(|| ev.cmul(black_box(&a), &pt).unwrap()));
        g.bench_function(format!("rot/{slots}"), |bch| bch.iter(|| ev.rot(black_box(&a), 37)));
        g.bench_function(format!("encrypt/{slots}"), |bch| bch.iter(|| ev.encrypt_slots(black_box(v.clone())).unwrap()));
        let low = ev.mul(&a, &b).unwrap();
        let cts = vec![low; 8];
        g.bench_function(format!("reencrypt8/{slots}"), |bch| bch.iter(|| tee.reencrypt_batch("bench", black_box(&cts)).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, primitives);
criterion_main!(benches);
