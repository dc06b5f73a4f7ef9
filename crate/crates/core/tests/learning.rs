use std::collections::BTreeMap;
use std::sync::Arc;

use fsdm::evalkit::{accuracy, Mask, MergeScheme};
use fsdm::experiment::features_to_obs;
use fsdm::neural::{train, ArchConfig, TrainConfig, TrainTarget};
use fsdm::oracle::random::{gaussian_sensor, markov_prior};
use fsdm::oracle::WorldModel;
use fsdm::sampler::{infer, SamplerConfig};
use fsdm::synth::{gen_dataset, SynthConfig};
use fsdm::{Conditioning, SensorBank};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn trained_sensors_beat_prior_only_on_held_out_recordings() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let world = WorldModel {
        epochs: 4,
        prior: markov_prior(&mut rng, 2.0),
        sensors: vec![gaussian_sensor(&mut rng, "a", 1.0, 0.6), gaussian_sensor(&mut rng, "b", 1.0, 0.9)],
    };
    let ds = gen_dataset(&SynthConfig {
        world,
        n_recordings: 250,
        waveforms: BTreeMap::new(),
        seed: 8,
    })
    .unwrap();
    assert_eq!(ds.test.len(), 50);

    let cfg = TrainConfig {
        steps: 8000,
        seed: 2,
        ..Default::default()
    };
    let arch = ArchConfig::default();
    let prior = train(&ds.train, &TrainTarget::Prior, &arch, &cfg).unwrap().0;
    let mut bank = SensorBank::new(Arc::new(prior));
    for s in ["a", "b"] {
        let net = train(&ds.train, &TrainTarget::Sensor(s.into()), &arch, &cfg).unwrap().0;
        bank.add_sensor(s, Arc::new(net)).unwrap();
    }

    let (mut with, mut without) = (0.0, 0.0);
    for rec in &ds.test {
        let obs = features_to_obs(&rec.observations());
        let none: Vec<(String, Conditioning)> = Vec::new();
        let sc = SamplerConfig {
            n_samples: 16,
            base_seed: rec.index as u64,
            ..Default::default()
        };
        let a = infer(&bank, &obs, 4, 4, &sc).unwrap().hypnogram;
        let b = infer(&bank, &none, 4, 4, &sc).unwrap().hypnogram;
        with += accuracy(&a, &rec.hypnogram, MergeScheme::Five, Mask::All).unwrap();
        without += accuracy(&b, &rec.hypnogram, MergeScheme::Five, Mask::All).unwrap();
    }
    assert!(with > without, "with sensors {with} vs prior only {without}");
}
