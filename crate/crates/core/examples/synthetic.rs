//! Ranking and ablation experiment on the synthetic corpus for one seed.
//!
//! `cargo run --release -p re3g-core --example synthetic -- <seed> <dir>`

use re3g_core::experiment::{run_ablation, run_ranking, synth_setup, RankingConfig};
use re3g_core::synth::SynthConfig;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let dir = std::path::PathBuf::from(std::env::args().nth(2).unwrap_or_else(|| "synthetic-run".into()));
    std::fs::create_dir_all(&dir).unwrap();
    let setup = synth_setup(&SynthConfig { seed, ..SynthConfig::default() }).unwrap();
    println!("train {} dev {} vocab {}", setup.train.len(), setup.dev.len(), setup.vocab.len());
    let cfg = RankingConfig::compact(setup.vocab.len(), seed);
    let ranking = run_ranking(&setup, &cfg, &dir).unwrap();
    println!("{}", serde_json::to_string_pretty(&ranking).unwrap());
    let ablation = run_ablation(&setup, &cfg, &dir).unwrap();
    println!("{}", serde_json::to_string_pretty(&ablation).unwrap());
}
