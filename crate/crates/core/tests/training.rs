use fms_core::data::{generate_dataset, DatasetConfig, Sample};
use fms_core::model::{DataShape, FmsModel, Mode, ModelConfig};
use fms_core::numeric::Tape;
use fms_core::train::{train_step, AdamState, AdamW};

const HP: AdamW = AdamW {
    lr: 1e-3,
    weight_decay: 0.02,
    beta1: 0.9,
    beta2: 0.999,
    eps: 1e-8,
};

fn corpus() -> (DatasetConfig, Vec<Sample>) {
    let cfg = DatasetConfig {
        num_samples: 40,
        seed: 17,
        ..Default::default()
    };
    let samples = generate_dataset(&cfg).unwrap();
    (cfg, samples)
}

/// A pair with both modalities forged, so every loss term is active.
fn mixed(samples: &[Sample]) -> &Sample {
    samples
        .iter()
        .find(|s| s.labels.image_fake() && s.labels.text_fake())
        .expect("corpus has a mixed forgery")
}

#[test]
fn single_sample_descent() {
    let (cfg, samples) = corpus();
    let s = mixed(&samples);
    let (model, mut store) =
        FmsModel::new(ModelConfig::default(), DataShape::from(&cfg), 0).unwrap();
    let mut state = AdamState::zeros(&store);
    let mut losses = Vec::new();
    for _ in 0..=50 {
        losses.push(
            train_step(&model, &mut store, &mut state, &HP, &[s])
                .unwrap()
                .total,
        );
    }
    let decreasing = losses.windows(2).filter(|w| w[1] < w[0]).count();
    assert!(
        decreasing >= 45,
        "only {decreasing} of 50 steps decreased: {losses:?}"
    );
}

#[test]
fn one_step_on_a_repeated_sample_lowers_the_objective() {
    let (cfg, samples) = corpus();
    let s = mixed(&samples);
    let batch = [s; 4];
    for seed in 0..5 {
        let (model, mut store) =
            FmsModel::new(ModelConfig::default(), DataShape::from(&cfg), seed).unwrap();
        let mut state = AdamState::zeros(&store);
        let before = train_step(&model, &mut store, &mut state, &HP, &batch)
            .unwrap()
            .total;
        let (_, after) = model.predict(&store, &batch, Mode::Train).unwrap();
        assert!(
            after.total < before,
            "seed {seed}: {before} -> {}",
            after.total
        );
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let (cfg, samples) = corpus();
    let (model, store) = FmsModel::new(ModelConfig::default(), DataShape::from(&cfg), 1).unwrap();
    let batch: Vec<&Sample> = samples.iter().take(16).collect();
    let tape = Tape::new();
    let p = store.bind(&tape);
    let out = model.forward(&p, &batch, Mode::Train).unwrap();
    let mut g = tape.backward(out.losses.total).unwrap();
    let grads = p.grads(&mut g);
    for (id, grad) in store.ids().zip(&grads) {
        assert!(grad.is_finite(), "{}", store.name(id));
        assert!(
            grad.data().iter().any(|&v| v != 0.0),
            "{} gets no gradient",
            store.name(id)
        );
    }
}
