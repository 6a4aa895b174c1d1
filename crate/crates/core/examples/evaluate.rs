//! Base-to-novel and cross-dataset evaluation of a teacher, a briefly tuned
//! student, their weight average over epochs, and the teacher+student ensemble.

use anyhow::Result;
use resdistill::benchmark::{benchmark_encoder, pretrain_teacher, PretrainConfig};
use resdistill::datasets::{class_counts, generate_toy_dataset, make_base_novel_split, sample_few_shot, ToySpec};
use resdistill::encoders::checkpoint::Checkpoint;
use resdistill::encoders::DualEncoder;
use resdistill::evaluator::{evaluate_base_to_novel, evaluate_cross_dataset, BaseToNovelRun, EvalConfig};
use resdistill::trainer::{average_checkpoints, list_epoch_checkpoints, train_run, TrainConfig, TrainData};

fn main() -> Result<()> {
    let spec = ToySpec::default();
    let mut pretrain = PretrainConfig::default();
    pretrain.clips_per_class = 4;
    pretrain.train.total_epochs = 10;
    let teacher = pretrain_teacher(&benchmark_encoder(), &spec.render, &pretrain)?;

    let ds = generate_toy_dataset(&spec)?;
    let split = make_base_novel_split(&ds.vocab, &class_counts(&ds.train), 1)?;
    let data = TrainData {
        manifest: sample_few_shot(&ds.train, &split.base, 8, 1).value,
        vocab: ds.vocab.subset(&split.base)?,
        loader: ds.loader(),
    };
    let dir = tempfile::tempdir()?;
    let config = TrainConfig {
        total_epochs: 3,
        warmup_epochs: 1,
        ..TrainConfig::default()
    };
    let out = train_run(&config, Some(&teacher), DualEncoder::student_from(&teacher)?, &data, dir.path())?;
    let epochs = list_epoch_checkpoints(dir.path())?
        .iter()
        .map(|p| Checkpoint::load(p))
        .collect::<Result<Vec<_>, _>>()?;
    let averaged = DualEncoder::from_checkpoint(&average_checkpoints(&epochs)?)?;

    let eval = EvalConfig::default();
    let runs = vec![
        BaseToNovelRun { name: "teacher".into(), models: vec![&teacher], split: &split },
        BaseToNovelRun { name: "student".into(), models: vec![&out.student], split: &split },
        BaseToNovelRun { name: "averaged".into(), models: vec![&averaged], split: &split },
        BaseToNovelRun { name: "ensemble".into(), models: vec![&teacher, &out.student], split: &split },
    ];
    println!("{}", evaluate_base_to_novel(&runs, &ds, &eval)?.summary());

    // A second toy dataset over other appearances; overlapping names are excluded.
    let target = generate_toy_dataset(&ToySpec {
        name: "target".into(),
        num_classes: 8,
        appearance_offset: 10,
        ..ToySpec::default()
    })?;
    let xds = evaluate_cross_dataset(&[&out.student], &data.vocab, &target, &eval)?;
    println!("{}", xds.summary());
    Ok(())
}
