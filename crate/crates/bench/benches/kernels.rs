use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use fmpc_core::scenario::{mass_on_car_mpc_config, mass_on_car_plants, mass_on_car_setup};
use fmpc_core::*;

fn error_chain(c: &mut Criterion) {
    let gains = [3.0, 1.5, 4.0, 2.0];
    let xi = JetVector::scalar(&[0.3, -0.1, 0.7, 0.2, -0.4]).unwrap();
    c.bench_function("error_variables r=5", |b| {
        b.iter(|| error_variables(black_box(&xi), &gains).unwrap())
    });
}

fn stage_and_cost(c: &mut Criterion) {
    let setup = mass_on_car_setup().unwrap();
    let config = mass_on_car_mpc_config(&setup).unwrap();
    let (plant, _) = mass_on_car_plants().unwrap();
    let xi = JetVector::scalar(&[0.5, -1.0]).unwrap();
    c.bench_function("stage_cost mass-on-car", |b| {
        b.iter(|| stage_cost(black_box(0.1), &xi, &[1.0], &config.stage).unwrap())
    });
    let u = ControlSignal::constant(
        0.0,
        config.spec.control_step,
        config.spec.intervals(),
        &[0.0],
        config.spec.saturation,
    )
    .unwrap();
    c.bench_function("cost_functional mass-on-car horizon", |b| {
        b.iter(|| {
            cost_functional(
                &plant,
                black_box(&u),
                &config.stage,
                setup.reference.as_ref(),
                &config.spec,
            )
            .unwrap()
        })
    });
}

fn rollout(c: &mut Criterion) {
    let setup = mass_on_car_setup().unwrap();
    let (plant, _) = mass_on_car_plants().unwrap();
    let law = setup.feedback_law().unwrap();
    c.bench_function("feedback_rollout 1s", |b| {
        b.iter(|| {
            let mut p = plant.clone();
            feedback_rollout(
                &mut p,
                &law,
                1.0,
                DEFAULT_INTEGRATOR_STEP,
                0.04,
                f64::INFINITY,
            )
            .unwrap()
        })
    });
}

fn first_ocp(c: &mut Criterion) {
    let setup = mass_on_car_setup().unwrap();
    let config = mass_on_car_mpc_config(&setup).unwrap();
    let (plant, _) = mass_on_car_plants().unwrap();
    let law = setup.feedback_law().unwrap();
    let mut group = c.benchmark_group("ocp");
    group.sample_size(10);
    group.bench_function("solve_ocp first mass-on-car", |b| {
        b.iter(|| {
            solve_ocp(
                &plant,
                &config.stage,
                &config.spec,
                setup.reference.as_ref(),
                None,
                Some(&law),
            )
            .unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, error_chain, stage_and_cost, rollout, first_ocp);
criterion_main!(benches);
