mod common;

use common::gradcheck_config;
use humsearch::embedder::{train, HeadPooling, LabeledMel};
use humsearch::rng;
use humsearch::{ArcFaceConfig, EmbedderError, TrainConfig};
use ndarray::Array2;
use rand::Rng;

/// Class 0 has a bright low band, class 1 a bright high band; both carry
/// small noise and vary in length so crops and padding are exercised.
fn two_bands(per_class: usize, seed: u64) -> Vec<LabeledMel> {
    let mut r = rng::stream(seed, &[0x626e]);
    let mut out = Vec::new();
    for label in 0..2 {
        for _ in 0..per_class {
            let frames = r.random_range(24..48);
            let values = Array2::from_shape_fn((frames, 16), |(_, m)| {
                let band = if label == 0 { m < 5 } else { m >= 11 };
                (if band { 0.0 } else { -8.0 }) + r.random_range(-0.3f32..0.3)
            });
            out.push(LabeledMel { values, label });
        }
    }
    out
}

fn smoke_train() -> TrainConfig {
    TrainConfig { epochs: 20, batch_size: 4, ..TrainConfig::default() }
}

#[test]
fn two_separated_classes_reach_full_accuracy() {
    let data = two_bands(8, 1);
    let cfg = gradcheck_config(3, HeadPooling::Flatten);
    let (_, h) = train(&data, -11.5, &cfg, &ArcFaceConfig::default(), &smoke_train()).unwrap();
    let last = h.last().unwrap();
    println!("final loss {:.4} accuracy {}", last.loss, last.accuracy);
    assert_eq!(h.epochs.len(), 20);
    assert_eq!(last.accuracy, 1.0);
}

#[test]
fn same_seeds_same_history_and_params() {
    let data = two_bands(4, 2);
    let cfg = gradcheck_config(5, HeadPooling::Global);
    let t = TrainConfig { epochs: 3, ..smoke_train() };
    let a = train(&data, -11.5, &cfg, &ArcFaceConfig::default(), &t).unwrap();
    let b = train(&data, -11.5, &cfg, &ArcFaceConfig::default(), &t).unwrap();
    assert_eq!(a.1, b.1);
    assert_eq!(a.0, b.0);
}

#[test]
fn one_class_is_insufficient() {
    let data: Vec<_> = two_bands(3, 3).into_iter().filter(|s| s.label == 0).collect();
    let cfg = gradcheck_config(1, HeadPooling::Global);
    let r = train(&data, -11.5, &cfg, &ArcFaceConfig::default(), &smoke_train());
    assert!(matches!(r, Err(EmbedderError::InsufficientData(_))));
}
