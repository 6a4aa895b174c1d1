//! Pretrains a toy teacher, fine-tunes residual / projector / undistilled
//! students on the base classes and prints base, novel and drift numbers.

use anyhow::Result;
use resdistill::benchmark::{run_benchmark, BenchmarkConfig};
use std::time::Instant;

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut config = BenchmarkConfig::default();
    if let Some(n) = std::env::args().nth(1) {
        config.seeds = (1..=n.parse::<u64>()?).collect();
    }
    let start = Instant::now();
    let report = run_benchmark(&config)?;
    for s in &report.seeds {
        println!("seed {}", s.seed);
        println!(
            "  {:<10} base_train {:>5.1} base {:>5.1} novel {:>5.1} drift {:.4} ens {:>5.1}",
            "teacher", s.teacher.base_train, s.teacher.base_test, s.teacher.novel_test, s.teacher.novel_drift, s.teacher.novel_ensemble
        );
        for (name, r) in &s.recipes {
            println!(
                "  {:<10} base_train {:>5.1} base {:>5.1} novel {:>5.1} drift {:.4} ens {:>5.1}",
                name, r.base_train, r.base_test, r.novel_test, r.novel_drift, r.novel_ensemble
            );
        }
    }
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
