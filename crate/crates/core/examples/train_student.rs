//! Fine-tunes a residual-distilled student on the base classes of a small toy
//! dataset, writing per-epoch checkpoints and the loss log to a directory.
//!
//! Usage: `cargo run --example train_student [out_dir]`

use anyhow::Result;
use resdistill::benchmark::{benchmark_encoder, pretrain_teacher, PretrainConfig};
use resdistill::datasets::{class_counts, generate_toy_dataset, make_base_novel_split, sample_few_shot, ToySpec};
use resdistill::encoders::DualEncoder;
use resdistill::trainer::{read_loss_log, train_run, TrainConfig, TrainData, LOSS_LOG};
use std::path::PathBuf;

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let out = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("resdistill-train"), PathBuf::from);

    let spec = ToySpec::default();
    let mut pretrain = PretrainConfig::default();
    pretrain.clips_per_class = 4;
    pretrain.train.total_epochs = 10;
    let teacher = pretrain_teacher(&benchmark_encoder(), &spec.render, &pretrain)?;

    let ds = generate_toy_dataset(&spec)?;
    let split = make_base_novel_split(&ds.vocab, &class_counts(&ds.train), 1)?;
    println!("base: {:?}", split.base);
    let data = TrainData {
        manifest: sample_few_shot(&ds.train, &split.base, 16, 1).value,
        vocab: ds.vocab.subset(&split.base)?,
        loader: ds.loader(),
    };
    let config = TrainConfig {
        total_epochs: 4,
        warmup_epochs: 1,
        ..TrainConfig::default()
    };
    let outcome = train_run(&config, Some(&teacher), DualEncoder::student_from(&teacher)?, &data, &out)?;
    let log = read_loss_log(&out.join(LOSS_LOG))?;
    println!("step 0: ce {:.4} fd_v {} fd_t {}", log[0].ce, log[0].fd_v, log[0].fd_t);
    for m in &outcome.checkpoints {
        println!("epoch {} step {}: {:?}", m.epoch, m.global_step, m.metrics);
    }
    println!("checkpoints in {}", out.display());
    Ok(())
}
