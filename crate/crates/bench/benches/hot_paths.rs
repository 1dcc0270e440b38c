use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use ilflow_core::policy::ActMode;
use ilflow_core::seeding;

fn flow_log_prob(c: &mut Criterion) {
    let flow = ilflow_bench::flow();
    let (s, s_next, h) = ilflow_bench::flow_batch(256, flow.dim());
    c.bench_function("flow_log_prob_batch_256", |b| {
        b.iter(|| flow.log_prob_standardized_batch(&s, &s_next, &h).unwrap())
    });
    c.bench_function("flow_sample_256", |b| {
        b.iter(|| flow.sample(&s[0], 1.0, 256, 0).unwrap())
    });
}

fn sac(c: &mut Criterion) {
    let (agent, _) = ilflow_bench::agent(64, 128, 2000);
    let mut rng = seeding::rng(0, seeding::streams::BATCH);
    c.bench_function("sac_update_h64_b128", |b| {
        b.iter_batched(
            || (agent.clone(), agent.replay.sample(128, &mut rng)),
            |(mut a, batch)| a.sac_update(&batch, &mut seeding::rng(1, 1)).unwrap(),
            BatchSize::LargeInput,
        )
    });
    let obs = agent.replay.sample(1, &mut rng).obs[0].clone();
    c.bench_function("actor_act", |b| {
        b.iter(|| agent.act(&obs, ActMode::Stochastic, &mut seeding::rng(2, 2)).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = flow_log_prob, sac
}
criterion_main!(benches);
