//! Removes one target class and compares how each method copes with a
//! source class that has no target counterpart.
//!
//! `cargo run --release --example negative_transfer -- [rotation_deg]`

use std::collections::BTreeSet;

use mada::{gen_multimode, train, Algorithm, SyntheticConfig, TrainConfig};

fn main() -> mada::Result<()> {
    let rotation: f64 = std::env::args().nth(1).map_or(30.0, |s| s.parse().expect("degrees"));
    for algorithm in [Algorithm::SourceOnly, Algorithm::Dann, Algorithm::Mada] {
        let mut accs = Vec::new();
        for seed in 0..3 {
            let task = SyntheticConfig { swap_prone: false, rotation_deg: rotation, seed, ..SyntheticConfig::default() };
            let syn = gen_multimode(&task)?.drop_target_classes(&BTreeSet::from([3]));
            let cfg = TrainConfig { algorithm, seed, ..TrainConfig::default() };
            let out = train(&cfg, &syn.source, &syn.target, Some(&syn.target_truth))?;
            accs.push(out.metrics.last().and_then(|m| m.target_accuracy).unwrap_or(f64::NAN));
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        println!("{:<12} target accuracy {:?} mean {mean:.3}", algorithm.name(), accs);
    }
    Ok(())
}
