use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;
use tissue_retract::kinematics::{ArmModel, IkSettings};
use tissue_retract::sim::Vec3;

fn kinematics(c: &mut Criterion) {
    let arm = ArmModel::default();
    let home = arm.home();
    c.bench_function("fk", |b| b.iter(|| arm.fk(black_box(&home))));
    c.bench_function("jacobian", |b| b.iter(|| arm.jacobian(black_box(&home))));

    let target = arm.fk(&home).position + Vec3::new(0.01, -0.005, 0.008);
    let settings = IkSettings::default();
    c.bench_function("ik_small_offset", |b| {
        b.iter(|| arm.ik(black_box(&target), &home, &settings).unwrap())
    });
}

criterion_group!(benches, kinematics);
criterion_main!(benches);
