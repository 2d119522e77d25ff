//! The command pipeline (pretrain, train, merge, eval, metrics, analyze) in a
//! scratch directory.

use pslora::commands::{cmd_analyze, cmd_eval, cmd_merge, cmd_metrics, cmd_pretrain, cmd_train, Analysis};
use pslora::config::ExperimentConfig;
use pslora::FrMode;

fn main() -> pslora::Result<()> {
    let dir = tempfile::tempdir()?;
    let cfg = ExperimentConfig {
        out_dir: dir.path().to_path_buf(),
        ..Default::default()
    };
    println!("pretrain: base accuracy {:.4}", cmd_pretrain(&cfg)?.base_accuracy);
    let train = cmd_train(&cfg)?;
    println!(
        "train: unmerged acc {:.4}, deployed acc {:.4}",
        train.unmerged_final_acc, train.final_acc
    );
    let merge = cmd_merge(&cfg, None)?;
    println!("merge: {} checksum {}", merge.strategy, merge.checksum);
    println!("eval: per task {:?}", cmd_eval(&cfg, None)?.per_task);
    let m = cmd_metrics(&cfg, &[], FrMode::Peak)?;
    println!("metrics: acc {:?} bwt {:?} fr {:?}", m.acc, m.bwt, m.fr);
    let sim = cmd_analyze(&cfg, Analysis::Similarity, None)?;
    println!(
        "similarity rows: {}",
        sim["summary"]["rows"].as_array().map_or(0, |r| r.len())
    );
    let mut files: Vec<String> = std::fs::read_dir(dir.path())?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    files.sort();
    println!("artifacts: {}", files.join(", "));
    Ok(())
}
