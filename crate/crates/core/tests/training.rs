use ltn_core::trainer_eval::{RunConfig, Trainer};

fn losses(steps: usize, seed: u64) -> Vec<f64> {
    let cfg = RunConfig {
        steps,
        seed,
        ..RunConfig::default()
    };
    let mut t = Trainer::new(cfg).unwrap();
    t.run_to_end(|_| {}).unwrap().iter().map(|m| m.loss).collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn default_loss_trends_down_over_200_steps() {
    let l = losses(200, 0);
    let first = mean(&l[..20]);
    let last = mean(&l[180..]);
    assert!(last < first, "first {first:.3} last {last:.3}");
    // Every 50-step window beats the one before it or stays within noise.
    let windows: Vec<f64> = l.chunks(50).map(mean).collect();
    for w in windows.windows(2) {
        assert!(w[1] < w[0] + 0.1, "{windows:?}");
    }
}

#[test]
fn default_run_ends_below_where_it_started() {
    for seed in [1, 2] {
        let l = losses(500, seed);
        assert!(mean(&l[480..]) < mean(&l[..20]), "seed {seed}");
        assert!(l.iter().all(|x| x.is_finite()));
    }
}
