//! Writes global-token attention heatmaps (overlay PNG plus raw weights) for
//! every frame of a toy clip.
//!
//! Usage: `cargo run --example attention_maps [out_dir]`

use anyhow::Result;
use resdistill::analysis::{attention_heatmaps, heatmap_paths, read_raw_weights};
use resdistill::benchmark::{benchmark_encoder, toy_tokenizer};
use resdistill::datasets::{ToyRender, ToyWorld};
use resdistill::encoders::{build_toy_dual_encoder, Role};
use std::path::PathBuf;

fn main() -> Result<()> {
    let out = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("resdistill-attention"), PathBuf::from);
    let model = build_toy_dual_encoder(&benchmark_encoder(), Role::Teacher)?.with_tokenizer(toy_tokenizer())?;
    let video = ToyWorld::new(ToyRender::default()).render_clip(9, 3, &[0, 4, 8, 12])?;
    let maps = attention_heatmaps(&model, &video, "demo", &out)?;
    for (t, grid) in maps.frames.iter().enumerate() {
        let (png, raw) = heatmap_paths(&out, t);
        assert_eq!(&read_raw_weights(&raw)?, grid);
        println!("frame {t}: mass {:.4} -> {}", grid.sum(), png.display());
    }
    Ok(())
}
