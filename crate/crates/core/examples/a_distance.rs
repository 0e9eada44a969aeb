//! Proxy A-distance on raw inputs and on learned features.

use mada::eval::embed;
use mada::{gen_multimode, proxy_a_distance, train, Algorithm, ProbeConfig, SyntheticConfig, Tensor, TrainConfig};

fn main() -> mada::Result<()> {
    let probe = ProbeConfig::default();
    let noise = |shift: f64| {
        let data = (0..400).map(|i| ((i * 37 % 101) as f64 / 50.0 - 1.0) + shift).collect();
        Tensor::new(200, 2, data).expect("sized")
    };
    println!("identical sets    d_A = {:.3}", proxy_a_distance(&noise(0.0), &noise(0.0), &probe)?);
    println!("shifted by 5      d_A = {:.3}", proxy_a_distance(&noise(0.0), &noise(5.0), &probe)?);

    let task = SyntheticConfig { swap_prone: false, rotation_deg: 40.0, ..SyntheticConfig::default() };
    let syn = gen_multimode(&task)?;
    println!(
        "raw inputs        d_A = {:.3}",
        proxy_a_distance(&syn.source.features, &syn.target.features, &probe)?
    );
    for algorithm in [Algorithm::SourceOnly, Algorithm::Dann, Algorithm::Mada] {
        let cfg = TrainConfig { algorithm, ..TrainConfig::default() };
        let out = train(&cfg, &syn.source, &syn.target, Some(&syn.target_truth))?;
        let fs = embed(&out.model, &syn.source)?;
        let ft = embed(&out.model, &syn.target)?;
        let d = proxy_a_distance(&fs.features, &ft.features, &probe)?;
        println!("{:<17} d_A = {d:.3}", format!("{} features", algorithm.name()));
    }
    Ok(())
}
