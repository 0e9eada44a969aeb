//! Round trip through feature CSVs: write a task, read it back, train on it,
//! save a checkpoint and export bottleneck embeddings.

use mada::data::{load_csv, load_labels, save_csv, save_labels, CsvSchema};
use mada::eval::export_embeddings;
use mada::{gen_multimode, train, Domain, MadaModel, SyntheticConfig, TrainConfig};

fn main() -> mada::Result<()> {
    let dir = std::env::temp_dir().join("mada-csv-example");
    std::fs::create_dir_all(&dir).expect("temp dir is writable");
    let task = SyntheticConfig { swap_prone: false, rotation_deg: 20.0, samples_per_class: 200, ..SyntheticConfig::default() };
    let syn = gen_multimode(&task)?;
    save_csv(dir.join("source.csv"), &[&syn.source])?;
    save_csv(dir.join("target.csv"), &[&syn.target])?;
    save_labels(dir.join("target_truth.csv"), &syn.target_truth)?;

    let schema = |domain| CsvSchema { dim: None, class_count: Some(4), domain: Some(domain) };
    let source = load_csv(dir.join("source.csv"), &schema(Domain::Source))?;
    let target = load_csv(dir.join("target.csv"), &schema(Domain::Target))?;
    let truth = load_labels(dir.join("target_truth.csv"))?;
    assert_eq!(source, syn.source);

    let cfg = TrainConfig { total_iterations: 500, ..TrainConfig::default() };
    let out = train(&cfg, &source, &target, Some(&truth))?;
    let ckpt = dir.join("checkpoint.txt");
    out.model.save(&ckpt)?;
    let reloaded = MadaModel::load(&ckpt)?;
    assert_eq!(reloaded, out.model);

    let emb = dir.join("embeddings.csv");
    export_embeddings(&reloaded, &[&source, &target], &emb)?;
    let last = out.metrics.last().expect("final record");
    println!("target accuracy {:?}, source accuracy {:.3}", last.target_accuracy, last.source_accuracy);
    println!("files in {}", dir.display());
    Ok(())
}
