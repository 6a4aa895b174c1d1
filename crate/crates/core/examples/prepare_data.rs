//! Generates the toy dataset on disk and fills its description cache with the
//! offline template provider; a second offline pass makes no requests.
//!
//! Usage: `cargo run --example prepare_data [dataset_dir]`

use anyhow::Result;
use resdistill::datasets::{
    fetch_descriptions, generate_toy_dataset, Dataset, DescriptionCache, TemplateProvider, ToySpec, DESCRIPTIONS_FILE,
};
use std::path::PathBuf;

fn main() -> Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("resdistill-toy"), PathBuf::from);
    generate_toy_dataset(&ToySpec::default())?.save(&dir)?;

    let ds = Dataset::load(&dir)?;
    let cache_path = dir.join(DESCRIPTIONS_FILE);
    let mut provider = TemplateProvider::default();
    let cache = fetch_descriptions(Some(&mut provider), &ds.vocab.names, &DescriptionCache::load(&cache_path)?, false)?;
    cache.save(&cache_path)?;
    println!("{} classes, {} provider requests", ds.vocab.len(), provider.requests);

    let again = fetch_descriptions(None, &ds.vocab.names, &DescriptionCache::load(&cache_path)?, true)?;
    println!("offline pass: {} cached, dataset with descriptions at {}", again.len(), dir.display());
    let reloaded = Dataset::load(&dir)?;
    println!("{:?}", reloaded.vocab.descriptions.iter().next());
    Ok(())
}
