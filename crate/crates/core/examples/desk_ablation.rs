//! Runs the desk-scale ablation (base, disable_mcl, mle_only) on the
//! synthetic corpus and prints one line per trained model.
//!
//! Usage: `cargo run --release -p mixcl-core --example desk_ablation [config.toml] [n_seeds]`

use std::path::Path;
use std::time::Instant;

use mixcl_core::pipeline::{desk_ablation, desk_world, PipelineConfig};
use mixcl_core::synth::SynthConfig;
use mixcl_core::training::AblationFlags;

fn main() -> mixcl_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let config = PipelineConfig::load(args.get(1).map(Path::new))?;
    let n_seeds: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5);
    let started = Instant::now();
    let desk = desk_world(&SynthConfig::default(), config.max_vocab)?;
    println!("vocab {} train {} test {}", desk.tokenizer.tokens().len(), desk.train.len(), desk.test.len());
    let variants = ["base", "disable_mcl", "mle_only"].map(|v| AblationFlags::parse(v).expect("known variant"));
    let seeds: Vec<u64> = (1..=n_seeds).collect();
    for r in desk_ablation(&desk, &config, &variants, &seeds)? {
        println!(
            "seed {} {:<12} KF1 {:.4} EF1 {:.4} F1 {:.4} ({:.1}s)",
            r.seed, r.variant, r.kf1, r.ef1, r.f1, r.seconds
        );
    }
    println!("total {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}
