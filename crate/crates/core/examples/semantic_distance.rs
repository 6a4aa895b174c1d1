//! Ranks vocabularies by Hausdorff similarity to a training vocabulary. Each
//! test vocabulary pairs every training class with a counterpart sharing two,
//! one or none of its words.

use anyhow::Result;
use resdistill::analysis::{semantic_distance_report, HausdorffMode, NameSource};
use resdistill::benchmark::{benchmark_encoder, toy_tokenizer};
use resdistill::datasets::toy::{lexicon_index, lexicon_name};
use resdistill::datasets::ClassVocabulary;
use resdistill::encoders::{build_toy_dual_encoder, Role};

fn main() -> Result<()> {
    let model = build_toy_dual_encoder(&benchmark_encoder(), Role::Teacher)?.with_tokenizer(toy_tokenizer())?;
    let vocab = |f: &dyn Fn(usize) -> usize| ClassVocabulary::new((0..6).map(|a| lexicon_name(f(a))).collect());
    let train = vocab(&|a| lexicon_index(a, 0))?;
    let tests = vec![
        ("same names".to_string(), vocab(&|a| lexicon_index(a, 0))?),
        ("same appearance".to_string(), vocab(&|a| lexicon_index(a, 2))?),
        ("disjoint".to_string(), vocab(&|a| lexicon_index(a + 8, 3))?),
    ];
    for mode in [HausdorffMode::MinMax, HausdorffMode::MeanMax] {
        let report = semantic_distance_report(("train", &train), &tests, &model, mode, NameSource::Templated)?;
        print!("{}", report.to_text());
    }
    Ok(())
}
