use frogdog::autodiff::{ParamSet, Tape};
use frogdog::data::{make_split, synth_generate, EmbeddingDataset, Split, SynthConfig, Task};
use frogdog::model::{Model, ModelConfig};
use frogdog::trainer::{TrainConfig, Trainer};

fn toy() -> EmbeddingDataset {
    synth_generate(&SynthConfig {
        n_classes: 4,
        n_domains: 2,
        dim: 32,
        samples_per: 20,
        low_band: 8,
        clutter_gain: vec![0.3, 0.6],
        seed: 21,
        text_variants: 2,
        text_noise: 6.0,
    })
    .unwrap()
}

fn mean_ce(model: &Model, params: &ParamSet, ds: &EmbeddingDataset, split: &Split, batch: usize) -> f64 {
    let mut total = 0.0;
    for ids in split.train.chunks(batch) {
        let b = ds.batch(ids, "train").unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape).unwrap();
        let l = model.losses(&mut tape, &bound, &b, &split.train_classes).unwrap();
        total += tape.value(l.ce).item() * ids.len() as f64;
    }
    total / split.train.len() as f64
}

#[test]
fn thirty_epochs_lower_cross_entropy() {
    let ds = toy();
    let split = make_split(&ds, Task::Dg, 3, 8).unwrap();
    assert_eq!(split.train_classes.len(), 4);
    let cfg = TrainConfig {
        epochs: 30,
        seed: 3,
        ..TrainConfig::default()
    };
    let model = Model::new(ModelConfig::default(), &ds).unwrap();
    let mut trainer = Trainer::new(model, &ds, &split, cfg.clone(), [0; 32]).unwrap();
    let before = mean_ce(&trainer.model, &trainer.params, &ds, &split, cfg.batch_size);
    trainer.run().unwrap();
    let after = mean_ce(&trainer.model, &trainer.params, &ds, &split, cfg.batch_size);
    assert_eq!(trainer.trace.len(), 30);
    assert!(after < before, "mean cross-entropy {before} -> {after}");
    let (first, last) = (trainer.trace[0].ce, trainer.trace[29].ce);
    assert!(last < first, "epoch trace {first} -> {last}");
}
