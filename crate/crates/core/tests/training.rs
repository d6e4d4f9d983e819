use multicolumn_core::data::{generate_synthetic, Split, SyntheticConfig};
use multicolumn_core::training::{train, TrainConfig};
use multicolumn_core::{Executor, Mode, Sequential};

/// Evaluates items back to front, then restores input order, as a
/// multi-threaded executor may.
struct Backwards;

impl Executor for Backwards {
    fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        let mut out: Vec<R> = items.iter().rev().map(f).collect();
        out.reverse();
        out
    }
}

fn setup() -> (multicolumn_core::data::Corpus, Split) {
    let corpus = generate_synthetic(&SyntheticConfig {
        num_identities: 10,
        sets_per_identity: 8,
        dim: 16,
        ..Default::default()
    })
    .unwrap();
    let ids: Vec<u32> = corpus.identities().collect();
    let split = Split::random(&ids, 0.8, 1).unwrap();
    (corpus, split)
}

#[test]
fn evaluation_order_does_not_change_the_checkpoint() {
    let (corpus, split) = setup();
    let cfg = TrainConfig {
        max_epochs: 5,
        batch_size: 16,
        lr_initial: 1.0,
        ..Default::default()
    };
    let a = train(&corpus, &split.train_identities, &cfg, &Sequential, |_| {}).unwrap();
    let b = train(&corpus, &split.train_identities, &cfg, &Backwards, |_| {}).unwrap();
    assert_eq!(a, b);
}

#[test]
fn loss_falls_and_history_matches_the_callback() {
    let (corpus, split) = setup();
    for mode in [Mode::MnV, Mode::MnVc] {
        let cfg = TrainConfig {
            mode,
            max_epochs: 20,
            batch_size: 16,
            lr_initial: 1.0,
            ..Default::default()
        };
        let mut seen = Vec::new();
        let ck = train(&corpus, &split.train_identities, &cfg, &Sequential, |s| {
            seen.push(s)
        })
        .unwrap();
        assert_eq!(
            ck.loss_history,
            seen.iter().map(|s| s.loss).collect::<Vec<_>>()
        );
        assert_eq!(ck.epoch as usize, seen.len());
        assert!(ck.loss_history.last().unwrap() < &(0.5 * ck.loss_history[0]));
        assert_eq!(ck.config_hash, cfg.hash());
    }
}

#[test]
fn small_steps_do_not_increase_the_batch_loss() {
    use multicolumn_core::data::assemble_training_sets;
    use multicolumn_core::numerics::{seeded_rng, standard_normal_vec};
    use multicolumn_core::training::{batch_loss_and_gradient, init_params, sgd_step};

    let (corpus, split) = setup();
    let mut sampler =
        assemble_training_sets(&corpus, &split.train_identities, 3, seeded_rng(5)).unwrap();
    let mut rng = seeded_rng(6);
    let mut passing = 0;
    for i in 0..100 {
        let mut params = init_params(16, sampler.num_classes(), &mut rng, true);
        let gates: Vec<f64> = standard_normal_vec(&mut rng, params.gate_param_count());
        let mut flat = params.to_flat();
        flat[..gates.len()].copy_from_slice(&gates);
        params.set_from_flat(&flat).unwrap();
        let batch = sampler.take_sets(16);
        let mode = if i % 2 == 0 { Mode::MnV } else { Mode::MnVc };
        let (before, grad) = batch_loss_and_gradient(&batch, &params, mode, &Sequential).unwrap();
        sgd_step(&mut params, &grad, 1e-3, 0.0).unwrap();
        let (after, _) = batch_loss_and_gradient(&batch, &params, mode, &Sequential).unwrap();
        passing += usize::from(after <= before + 1e-6);
    }
    assert!(passing >= 99, "{passing} of 100");
}
