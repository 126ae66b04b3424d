use std::path::PathBuf;

use dtbks::data::{load_csv, split, Dataset, Schema, SplitSpec, Standardizer, TargetValues};
use dtbks::model::{draw_train_noise, Network, OmegaSource, Structure, Task};
use dtbks::numerics::{RngStream, Tensor};
use dtbks::tdist::DiagStudentT;
use dtbks::training::{fit, objective, DofMode, FitConfig, RawParams};

fn toy(n: usize, seed: u64) -> Dataset {
    let mut rng = RngStream::new(seed);
    let x: Vec<f64> = (0..n * 3).map(|_| rng.std_normal()).collect();
    let y: Vec<f64> = (0..n).map(|i| x[3 * i].sin() - 0.5 * x[3 * i + 2] + 0.1 * rng.std_normal()).collect();
    Dataset::new(
        Tensor::matrix(n, 3, x).unwrap(),
        TargetValues::Regression(Tensor::matrix(n, 1, y).unwrap()),
        vec!["a".into(), "b".into(), "c".into()],
        "y".into(),
        vec![],
    )
    .unwrap()
}

#[test]
fn full_dataset_scale_gives_unbiased_minibatch_gradients() {
    let n = 16;
    let ds = toy(n, 3);
    let template = Network::from_prior(
        Structure { layers: 2, eta: 2, bank_size: 4 },
        3,
        Task::Regression { sigma_y2: 0.3, out_dim: 1 },
        2.1,
    )
    .unwrap();
    let mut rng = RngStream::new(8);
    let mut raw = RawParams::from_network(&template);
    raw.groups.iter_mut().flatten().for_each(|v| *v += 0.3 * rng.std_normal());
    let cfg = FitConfig { dof: DofMode::Learned, ..FitConfig::default() };
    let noise = draw_train_noise(&raw.to_network(&template, cfg.dof).unwrap(), &mut rng, 3);
    let full = objective(&raw, &template, &ds.features, &ds.targets(), &noise, &cfg, n).unwrap().grads;
    let full: Vec<f64> = full.groups.concat();

    for b in [4, 8] {
        let draws = 3000;
        let dim = full.len();
        let (mut sum, mut sq) = (vec![0.0; dim], vec![0.0; dim]);
        for _ in 0..draws {
            let idx = &rng.permutation(n)[..b];
            let batch = ds.select(idx);
            let g = objective(&raw, &template, &batch.features, &batch.targets(), &noise, &cfg, n)
                .unwrap()
                .grads
                .groups
                .concat();
            for i in 0..dim {
                sum[i] += g[i];
                sq[i] += g[i] * g[i];
            }
        }
        for i in 0..dim {
            let mean = sum[i] / draws as f64;
            let var = (sq[i] / draws as f64 - mean * mean).max(0.0);
            let se = (var / draws as f64).sqrt();
            assert!(
                (mean - full[i]).abs() <= 4.5 * se + 1e-9 * full[i].abs().max(1.0),
                "B={b} coordinate {i}: minibatch mean {mean} vs full {} (se {se})",
                full[i]
            );
        }
    }
}

fn boston_train() -> Dataset {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/boston.csv");
    let schema = Schema::load(&path.with_extension("schema.toml")).unwrap();
    let ds = load_csv(&path, &schema).unwrap();
    let (train, _) = split(&ds, &SplitSpec::default(), 0).unwrap();
    Standardizer::fit(&train).and_then(|s| s.transform(&train)).unwrap()
}

#[test]
fn boston_objective_halves_and_invariants_hold() {
    let train = boston_train();
    let cfg = FitConfig { early_stop_window: 0, ..FitConfig::default() };
    let structure = Structure { layers: 2, eta: 3, bank_size: cfg.bank_size };
    let (net, report) = fit(&train, &cfg, structure, OmegaSource::Inferred).unwrap();
    assert_eq!(report.epochs_run, 500);
    assert!(report.skipped_iterations.is_empty());
    let first = report.objective[0];
    let last_epoch = *report.epoch_objective.last().unwrap();
    assert!(last_epoch <= 0.5 * first, "objective {first} -> {last_epoch}");
    let worst = report.divergence.iter().copied().fold(f64::INFINITY, f64::min);
    assert!(worst >= -1e-9, "divergence dipped to {worst}");
    assert!(report.divergence[0].abs() < 1e-10);
    for layer in &net.layers {
        for q in [&layer.q_omega, &layer.q_w] {
            assert!(q.sigma2().iter().all(|s| *s > 0.0 && s.is_finite()));
            assert!(q.nu() > 0.0);
        }
    }
}

#[test]
fn learned_dof_stays_positive() {
    let ds = toy(64, 5);
    let cfg = FitConfig {
        epochs: 30,
        batch_size: 16,
        learning_rate: 0.05,
        dof: DofMode::Learned,
        early_stop_window: 0,
        bank_size: 10,
        ..FitConfig::default()
    };
    let (net, report) = fit(&ds, &cfg, Structure { layers: 2, eta: 2, bank_size: 10 }, OmegaSource::Inferred).unwrap();
    assert!(report.objective.iter().all(|v| v.is_finite()));
    for layer in &net.layers {
        assert!(layer.q_w.nu() > 0.1 && layer.q_omega.nu() > 0.1);
        assert_ne!(layer.q_w.nu(), 2.1);
    }
}

#[test]
fn frozen_prior_only_moves_weights() {
    let ds = toy(48, 6);
    let cfg = FitConfig { epochs: 5, batch_size: 16, bank_size: 6, ..FitConfig::default() };
    let structure = Structure { layers: 2, eta: 2, bank_size: 6 };
    let (net, _) = fit(&ds, &cfg, structure, OmegaSource::FrozenPrior).unwrap();
    for layer in &net.layers {
        assert!(layer.frozen_bank.is_some());
        assert_eq!(layer.q_omega, DiagStudentT::standard(layer.d_in, 2.1).unwrap());
        assert_ne!(layer.q_w, DiagStudentT::standard(layer.eta * 6, 2.1).unwrap());
    }
}
