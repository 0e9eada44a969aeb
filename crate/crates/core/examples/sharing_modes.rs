//! Independent, partially shared and fully shared class-wise discriminators.

use mada::{gen_multimode, train, ShareMode, SyntheticConfig, TrainConfig};

fn main() -> mada::Result<()> {
    let task = SyntheticConfig { swap_prone: false, rotation_deg: 30.0, ..SyntheticConfig::default() };
    let syn = gen_multimode(&task)?;
    for share_mode in [ShareMode::Independent, ShareMode::Partial, ShareMode::Full] {
        let cfg = TrainConfig { share_mode, total_iterations: 1000, ..TrainConfig::default() };
        let out = train(&cfg, &syn.source, &syn.target, Some(&syn.target_truth))?;
        let bank = &out.model.discriminators;
        let same = (1..bank.len()).all(|k| bank.discriminator(k) == bank.discriminator(0));
        println!(
            "{share_mode:?}: {} discriminators over {} distinct layers, all identical: {same}, target accuracy {:.3}",
            bank.len(),
            bank.pool.len(),
            out.metrics.last().and_then(|m| m.target_accuracy).unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
