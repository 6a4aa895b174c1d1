//! Encodes a toy clip and a few prompts with a freshly built dual encoder and
//! prints the scaled cosine logits.

use anyhow::Result;
use resdistill::benchmark::{benchmark_encoder, toy_tokenizer};
use resdistill::datasets::{toy::lexicon_name, ToyRender, ToyWorld};
use resdistill::encoders::{build_toy_dual_encoder, pool_frames, Role};
use resdistill::objective::similarity_logits;

fn main() -> Result<()> {
    let model = build_toy_dual_encoder(&benchmark_encoder(), Role::Teacher)?.with_tokenizer(toy_tokenizer())?;
    let world = ToyWorld::new(ToyRender::default());
    let video = world.render_clip(5, 42, &[0, 2, 4, 6, 8, 10, 12, 14])?;

    let frames = model.encode_video_frames(&video)?;
    let pooled = pool_frames(&frames)?;
    println!("{} frames -> {}-d video embedding (norm {:.3})", frames.features.nrows(), pooled.len(), pooled.norm());

    let names: Vec<String> = (4..8).map(lexicon_name).collect();
    let prompts: Vec<String> = names.iter().map(|n| format!("A video of {n}")).collect();
    let text = model.encode_prompts(&prompts)?;
    let video_emb = model.encode_videos(&[video])?;
    let logits = similarity_logits(video_emb.view(), text.view(), 100.0)?;
    for (name, l) in names.iter().zip(logits.values.row(0)) {
        println!("{l:>9.3}  {name}");
    }
    Ok(())
}
