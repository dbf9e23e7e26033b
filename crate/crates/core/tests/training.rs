use ebmflow::base::BaseKind;
use ebmflow::config::RunConfig;
use ebmflow::data::{make_dataset, make_splits, DatasetId};
use ebmflow::rng;
use ebmflow::train::{histogram_kl, sample_quality_2d, Trainer};

const BASES: [BaseKind; 4] = [BaseKind::Rbm, BaseKind::Dflow, BaseKind::Multicov, BaseKind::Gaussian];

#[test]
fn loss_decreases_over_first_fifty_steps() {
    for name in ["moons", "rings", "gauss8", "checker"] {
        let id = DatasetId::parse(name, None).unwrap();
        for base in BASES {
            let (mut early, mut late) = (0.0, 0.0);
            for seed in 0..3 {
                let mut c = RunConfig::new(base, name);
                c.training.seed = seed;
                c.training.pcd_k = 20;
                let data = make_dataset(&id, 1000, seed).unwrap();
                let mut t = Trainer::new(c, data.spec).unwrap();
                let losses: Vec<f64> = (0..50)
                    .map(|s| {
                        let idx: Vec<usize> = (s * 20..(s + 1) * 20).collect();
                        t.train_step(&data.rows(&idx)).unwrap().loss
                    })
                    .collect();
                early += losses[..10].iter().sum::<f64>();
                late += losses[40..].iter().sum::<f64>();
            }
            assert!(late < early, "{name} {base:?}: first ten {early:.3}, last ten {late:.3}");
        }
    }
}

#[test]
fn generator_self_distance_is_small() {
    let id = DatasetId::Gauss8;
    let a = make_dataset(&id, 10_000, 1).unwrap();
    let b = make_dataset(&id, 10_000, 2).unwrap();
    let kl = histogram_kl(&a.x, &b.x, 32).unwrap();
    assert!(kl < 0.05, "{kl}");
}

#[test]
fn training_improves_sample_quality() {
    let id = DatasetId::Gauss8;
    let (train, test) = make_splits(&id, 500, 500, 3).unwrap();
    let heldout = make_dataset(&id, 10_000, rng::derive_seed(3, 9)).unwrap();
    let mut c = RunConfig::new(BaseKind::Rbm, "gauss8");
    c.architecture.hidden = 32;
    c.architecture.couplings = 4;
    c.training.learning_rate = 1e-3;
    c.training.pcd_k = 50;
    c.training.seed = 3;
    let mut t = Trainer::new(c, train.spec).unwrap();
    let before = sample_quality_2d(&t.model, &heldout, 32, 10_000, 5).unwrap();
    t.fit(&train, &test, 30, |_| Ok(())).unwrap();
    let after = sample_quality_2d(&t.model, &heldout, 32, 10_000, 5).unwrap();
    assert!(after < before, "untrained {before:.4}, trained {after:.4}");

    let train_nll = t.evaluate(&train).unwrap().nll_nats;
    let test_nll = t.history.last().unwrap().nll_nats;
    if train_nll > test_nll {
        eprintln!("note: train nll {train_nll:.4} above test nll {test_nll:.4}");
    }
}
