use std::collections::BTreeMap;

use lwdistill::data::generate_spirals;
use lwdistill::engine::{run_distillation, DistillOptions, DistillationRun};
use lwdistill::maps::MapKind;
use lwdistill::network::{Model, ModelSpec};
use lwdistill::oracle::replay_scheduler;
use lwdistill::scheduler::{
    initial_states, lr_table, scheduler_step, update_layer_lr, LayerLrState, SchedulerConfig, SchedulerMode,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn layerwise(gamma: f64) -> SchedulerConfig {
    SchedulerConfig {
        mode: SchedulerMode::Layerwise,
        base_lr: 0.05,
        gamma,
        // Wide clamp so the recurrence itself is what gets compared.
        alpha_min: 1e-300,
        alpha_max: 1e300,
        ..SchedulerConfig::default()
    }
}

#[test]
fn momentum_matches_geometric_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..500 {
        let gamma = rng.random_range(0.0..1.0);
        let c = rng.random_range(0.0..std::f64::consts::LN_2);
        let eta0 = rng.random_range(0.0..1.0);
        let cfg = layerwise(gamma);
        let mut s = LayerLrState::new(2, 0.05, eta0);
        for u in 1..=40 {
            s = update_layer_lr(s, c, &cfg).unwrap();
            let g = gamma.powi(u);
            let closed = g * eta0 + (1.0 - g) * c;
            assert!((s.eta - closed).abs() <= 1e-12, "u={u} gamma={gamma}: {} vs {closed}", s.eta);
        }
    }
}

#[test]
fn recurrence_matches_independent_replay() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let cfg = SchedulerConfig {
            gamma: rng.random_range(0.0..1.0),
            alpha_min: 1e-4,
            alpha_max: rng.random_range(0.06..2.0),
            ..layerwise(0.9)
        };
        let layers = [0, 2, 5];
        let trace: Vec<BTreeMap<usize, f64>> = (0..rng.random_range(1..20))
            .map(|_| layers.iter().map(|&l| (l, rng.random_range(0.0..0.7))).collect())
            .collect();
        let mut states = initial_states(&layers, &cfg);
        for step in &trace {
            states = states.iter().map(|s| update_layer_lr(*s, step[&s.layer], &cfg).unwrap()).collect();
        }
        let replayed = replay_scheduler(&trace, &initial_states(&layers, &cfg), &cfg).unwrap();
        assert_eq!(states, replayed);
    }
}

#[test]
fn off_interval_epochs_change_nothing() {
    let cfg = SchedulerConfig {
        update_interval_epochs: 7,
        ..layerwise(0.9)
    };
    let states = vec![LayerLrState::new(1, 0.3, 0.02), LayerLrState::new(4, 0.01, 0.5)];
    let jsd: BTreeMap<usize, f64> = [(1, 0.4), (4, 0.1)].into();
    for epoch in 1..100 {
        let (next, table) = scheduler_step(&states, epoch, &jsd, &cfg).unwrap();
        if epoch % 7 == 0 {
            assert_ne!(next, states, "epoch {epoch}");
        } else {
            assert_eq!(next, states, "epoch {epoch}");
            assert_eq!(table, lr_table(&states, epoch, &cfg));
            // Off-interval epochs do not even need a reading.
            assert_eq!(scheduler_step(&states, epoch, &BTreeMap::new(), &cfg).unwrap().0, states);
        }
    }
}

#[test]
fn larger_divergence_never_raises_the_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = SchedulerConfig {
        alpha_min: 1e-3,
        alpha_max: 1.0,
        ..layerwise(0.8)
    };
    for _ in 0..1000 {
        let s = LayerLrState::new(0, rng.random_range(0.002..0.9), rng.random_range(0.0..0.7));
        let a = rng.random_range(0.0..0.7);
        let b = rng.random_range(0.0..0.7);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let at_lo = update_layer_lr(s, lo, &cfg).unwrap();
        let at_hi = update_layer_lr(s, hi, &cfg).unwrap();
        assert!(at_hi.alpha <= at_lo.alpha);
        assert!(at_hi.eta >= at_lo.eta);
        for r in [at_lo, at_hi] {
            assert!((cfg.alpha_min..=cfg.alpha_max).contains(&r.alpha));
        }
    }
}

#[test]
fn clamp_bounds_are_hit_exactly() {
    let cfg = SchedulerConfig {
        alpha_min: 0.01,
        alpha_max: 0.2,
        ..layerwise(0.0)
    };
    let up = update_layer_lr(LayerLrState::new(0, 0.05, 0.0), 1e-6, &cfg).unwrap();
    assert_eq!(up.alpha, 0.2);
    let mut s = LayerLrState::new(0, 0.05, 0.0);
    // With gamma = 0 the momentum equals the reading; a huge reading shrinks alpha.
    s = update_layer_lr(s, 1e6, &cfg).unwrap();
    assert_eq!(s.alpha, 0.01);
    assert_eq!(s.eta, 1e6);
}

#[test]
fn multistep_applies_exact_factors() {
    for base in [0.1, 0.05, 0.3, 0.07] {
        let cfg = SchedulerConfig {
            mode: SchedulerMode::MultiStep,
            base_lr: base,
            ..SchedulerConfig::default()
        };
        let states = initial_states(&[1, 3], &cfg);
        let at = |epoch| lr_table(&states, epoch, &cfg);
        for epoch in 1..25 {
            assert_eq!(at(epoch).lr_for(1), base);
        }
        assert_eq!(at(25).lr_for(1), base * 0.01);
        assert_eq!(at(25).lr_for(9), base * 0.01);
        assert_eq!(at(34).lr_for(3), base * 0.01);
        assert_eq!(at(35).lr_for(3), base * 0.0001);
        assert_eq!(at(35).default_lr, base * 0.0001);
        assert_eq!(at(80).lr_for(1), base * 0.0001);
    }
}

#[test]
fn none_mode_holds_base_rate() {
    let cfg = SchedulerConfig {
        mode: SchedulerMode::None,
        base_lr: 0.05,
        ..SchedulerConfig::default()
    };
    let mut states = initial_states(&[0, 2], &cfg);
    let jsd: BTreeMap<usize, f64> = [(0, 0.3), (2, 0.2)].into();
    for epoch in 1..=60 {
        let (next, table) = scheduler_step(&states, epoch, &jsd, &cfg).unwrap();
        assert_eq!(next, states);
        assert_eq!(table.lr_for(0), 0.05);
        assert_eq!(table.default_lr, 0.05);
        states = next;
    }
}

/// The rates a training run reports follow from the divergences it reports:
/// each update consumes the mean probe divergence since the last update.
#[test]
fn training_run_follows_the_recurrence() {
    let data = generate_spirals(20, 3, 0.05, 4).unwrap();
    let build = |layers: &[&str], seed| {
        Model::build(ModelSpec {
            input_shape: vec![2],
            layers: layers.iter().map(|l| l.parse().unwrap()).collect(),
            seed,
        })
        .unwrap()
    };
    let teacher = build(&["dense 10 tanh", "dense 5 tanh", "classifier 3"], 1);
    let student = build(&["dense 5 tanh", "classifier 3"], 2);
    let cfg = SchedulerConfig {
        mode: SchedulerMode::Layerwise,
        base_lr: 0.05,
        update_interval_epochs: 3,
        alpha_max: 0.5,
        ..SchedulerConfig::default()
    };
    let opts = DistillOptions {
        epochs: 9,
        batch_size: 8,
        probe_size: 16,
        ..DistillOptions::default()
    };
    let mut run = DistillationRun::new(student, teacher, MapKind::Attention, cfg.clone(), opts, &data).unwrap();
    let layers = run.pairing.student_layers();
    let results = run_distillation(&mut run, &data).unwrap();
    let mut state = initial_states(&layers, &cfg);
    for window in results.chunks(3) {
        let signal: BTreeMap<usize, f64> = layers
            .iter()
            .map(|&l| (l, window.iter().map(|r| r.per_layer_jsd[&l]).sum::<f64>() / window.len() as f64))
            .collect();
        state = replay_scheduler(&[signal], &state, &cfg).unwrap();
        let last = window.last().unwrap();
        for s in &state {
            assert!((last.per_layer_alpha[&s.layer] - s.alpha).abs() <= 1e-12 * s.alpha);
        }
        for r in &window[..2] {
            assert_eq!(r.per_layer_alpha, window[0].per_layer_alpha);
        }
    }
}
