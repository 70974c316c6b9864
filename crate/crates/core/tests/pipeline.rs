//! Library-level end-to-end behaviour across modules.

use elimipl::eval::{attention_rows, run_experiment};
use elimipl::synth::Provenance;
use elimipl::{
    generate, load_dataset, train, train_with_eval, ExperimentConfig, MiplDataset, ModelParams, SynthConfig, TrainConfig,
    Variant,
};

fn small_synth(seed: u64) -> elimipl::synth::SynthOutput {
    generate(&SynthConfig {
        m: 90,
        bag_size: (6, 12),
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn quick() -> TrainConfig {
    TrainConfig {
        epochs: 40,
        batch_size: 8,
        lr0: 0.05,
        embed_dim: 16,
        ..TrainConfig::default()
    }
}

#[test]
fn dataset_and_provenance_survive_disk() {
    let dir = tempfile::tempdir().unwrap();
    let out = small_synth(4);
    let path = dir.path().join("s.jsonl");
    out.dataset.save(&path).unwrap();
    let prov = dir.path().join("s.provenance.jsonl");
    out.provenance.save(&prov).unwrap();
    let back = load_dataset(&path).unwrap();
    assert_eq!(back, out.dataset);
    assert_eq!(Provenance::load(&prov).unwrap(), out.provenance);
}

#[test]
fn training_learns_small_problem_and_checkpoint_round_trips() {
    let out = small_synth(1);
    let (tr, te) = out.dataset.split(0.7, 1).unwrap();
    let cfg = quick();
    let model = cfg.init_model(&tr, 1).unwrap();
    let rep = train_with_eval(&tr, model, &cfg, Some(&te)).unwrap();
    let first = rep.epochs[0].loss.total;
    let last = rep.last();
    assert!(last.loss.total < first, "{first} -> {}", last.loss.total);
    assert!(last.test.unwrap().accuracy >= 0.8, "{:?}", last.test);
    for e in &rep.epochs {
        assert_eq!(e.lr, elimipl::cosine_lr(e.epoch - 1, cfg.epochs, cfg.lr0));
    }

    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    rep.params.save(&ckpt).unwrap();
    let loaded = ModelParams::load(&ckpt).unwrap();
    assert_eq!(loaded, rep.params);
    let a = elimipl::accuracy(&loaded, &te).unwrap();
    assert_eq!(a, last.test.unwrap().accuracy);
}

#[test]
fn attention_prefers_true_class_instances_after_training() {
    // Per-instance scores can only single out positives when negatives never
    // share a class with anyone's true label.
    let out = generate(&SynthConfig {
        m: 90,
        bag_size: (10, 16),
        pos_fraction: 0.2,
        background_classes: 3,
        seed: 7,
        ..SynthConfig::default()
    })
    .unwrap();
    let cfg = quick();
    let rep = train(&out.dataset, cfg.init_model(&out.dataset, 0).unwrap(), &cfg).unwrap();
    let rows = attention_rows(&rep.params, &out.dataset, Some(&out.provenance)).unwrap();
    let mut better = 0;
    for bag in out.dataset.bags() {
        let y = bag.true_label().unwrap();
        let mine: Vec<_> = rows.iter().filter(|r| r.bag_id == bag.bag_id()).collect();
        let mean = |pos: bool| {
            let v: Vec<f64> = mine.iter().filter(|r| (r.provenance_class == Some(y)) == pos).map(|r| r.score).collect();
            v.iter().sum::<f64>() / v.len().max(1) as f64
        };
        if mean(true) > mean(false) {
            better += 1;
        }
    }
    let acc = elimipl::accuracy(&rep.params, &out.dataset).unwrap();
    assert!(better as f64 >= 0.8 * out.dataset.len() as f64, "{better}/{} acc {acc}", out.dataset.len());
}

#[test]
fn experiments_are_schedule_independent() {
    let out = small_synth(2);
    let cfg = ExperimentConfig {
        train: TrainConfig { epochs: 3, ..quick() },
        ratio: 0.7,
        seeds: vec![0, 1, 2],
    };
    let a = run_experiment(&out.dataset, &cfg).unwrap();
    let b = run_experiment(&out.dataset, &cfg).unwrap();
    assert_eq!(a.summary, b.summary);
    let single = run_experiment(&out.dataset, &ExperimentConfig { seeds: vec![1], ..cfg.clone() }).unwrap();
    assert_eq!(single.runs[0].test, a.runs[1].test);
}

#[test]
fn variants_share_splits_and_initialization() {
    let out = small_synth(3);
    let (tr, _) = out.dataset.split(0.7, 5).unwrap();
    let base = TrainConfig { epochs: 1, ..quick() };
    let inits: Vec<ModelParams> = Variant::ALL
        .iter()
        .map(|&v| TrainConfig { variant: v, ..base.clone() }.init_model(&tr, 5).unwrap())
        .collect();
    assert!(inits.windows(2).all(|w| w[0] == w[1]));
    let ce = TrainConfig { variant: Variant::Ce, ..base };
    let rep = train(&tr, inits[0].clone(), &ce).unwrap();
    // frozen weights stay uniform
    let masks = tr.candidate_masks();
    for (i, m) in masks.iter().enumerate() {
        for &(_, w) in rep.weights.row(i) {
            assert_eq!(w, 1.0 / m.count() as f64);
        }
    }
}

#[test]
fn unlabeled_dataset_trains_but_cannot_be_evaluated() {
    let out = small_synth(6);
    let bags: Vec<_> = out
        .dataset
        .bags()
        .iter()
        .map(|b| elimipl::Bag::new(b.bag_id(), b.instances().to_owned(), b.candidates().clone(), None).unwrap())
        .collect();
    let ds = MiplDataset::new("blind", 5, 10, None, bags).unwrap();
    let cfg = TrainConfig { epochs: 2, ..quick() };
    let rep = train(&ds, cfg.init_model(&ds, 0).unwrap(), &cfg).unwrap();
    assert!(rep.epochs.iter().all(|e| e.train.is_none()));
    assert!(elimipl::accuracy(&rep.params, &ds).is_err());
}
