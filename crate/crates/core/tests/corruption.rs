//! The corrupted domains must actually hurt a clean-trained model, and more
//! so at higher severity; every adaptation experiment relies on that gap.

use otvp::data::{generate, split, CorruptionKind, DomainSpec, MAX_SEVERITY};
use otvp::model::{accuracy, train_source, TrainConfig, ViTConfig};
use otvp::ViTParams;

const NOISE_DROP_MIN: f64 = 10.0;
const MONOTONE_SLACK: f64 = 2.0;

#[test]
fn severity_degrades_source_accuracy() {
    let cfg = ViTConfig { image_size: 16, embed_dim: 32, num_layers: 2, num_heads: 4, ..Default::default() };
    let source = generate(&DomainSpec::clean("clean", 1), 5600, 7, 16).unwrap();
    let (train, val) = split(&source, 0.8, 0).unwrap();
    let (params, report) = train_source(
        &ViTParams::init(&cfg).unwrap(),
        (&train.images, &train.labels),
        (&val.images, &val.labels),
        &TrainConfig { epochs: 20, ..Default::default() },
    )
    .unwrap();
    assert!(report.best_val_accuracy >= 0.95, "source val {}", report.best_val_accuracy);

    let seeds = [100u64, 101, 102];
    for kind in CorruptionKind::ALL {
        let curve: Vec<f64> = (0..=MAX_SEVERITY)
            .map(|severity| {
                let accs: Vec<f64> = seeds
                    .iter()
                    .map(|&s| {
                        let ds = generate(&DomainSpec::corrupted(kind, severity, s), 448, 7, 16).unwrap();
                        accuracy(&params, None, &ds.images, &ds.labels).unwrap()
                    })
                    .collect();
                100.0 * accs.iter().sum::<f64>() / accs.len() as f64
            })
            .collect();
        eprintln!("{:15} {:?}", kind.name(), curve.iter().map(|a| (a * 10.0).round() / 10.0).collect::<Vec<_>>());
        for w in curve.windows(2) {
            assert!(w[1] <= w[0] + MONOTONE_SLACK, "{}: {:?}", kind.name(), curve);
        }
        if kind == CorruptionKind::GaussianNoise {
            assert!(curve[0] - curve[5] >= NOISE_DROP_MIN, "noise drop {:?}", curve);
        }
    }
}
