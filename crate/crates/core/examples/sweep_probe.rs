use maskkv_core::harness::compare::{aggregate_metric, run_compare, CompareConfig, PolicyName};
use maskkv_core::model::ModelConfig;

fn env_usize(key: &str, default: usize) -> usize {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() {
    let layers = env_usize("SP_LAYERS", 4);
    let heads = env_usize("SP_HEADS", 4);
    let dim = env_usize("SP_DIM", 32);
    let vocab = env_usize("SP_VOCAB", 64) as u32;
    let gen_len = env_usize("SP_GEN", 8);
    let seeds = env_usize("SP_SEEDS", 50) as u64;
    let model = ModelConfig::new(layers, heads, dim, vocab, env_usize("SP_MODELSEED", 20250810) as u64);
    let mut config = CompareConfig::new(model);
    config.prompt_len = 64;
    config.gen_len = gen_len;
    config.budgets = vec![2, 4, 8, 16];
    config.policies = PolicyName::ALL.to_vec();
    config.seeds = (1..=seeds).collect();
    config.calibration_seeds = (9001..=9008).collect();
    let start = std::time::Instant::now();
    let report = run_compare(&config).unwrap();
    let elapsed = start.elapsed();
    println!("sweep took {elapsed:?} (layers={layers} heads={heads} dim={dim} vocab={vocab} gen={gen_len})");
    let reference = report.find("aggregate reference").unwrap();
    println!("reference needle_accuracy = {}", reference.get("needle_accuracy").unwrap());
    for policy in ["maskkv", "uniform", "snap", "pyramid", "squeeze", "ada"] {
        print!("{policy:>8}: agreement ");
        for &b in &[2usize, 4, 8, 16] {
            print!("{:>8.4}", aggregate_metric(&report, policy, b, "mean_agreement").unwrap());
        }
        print!("  needle ");
        for &b in &[2usize, 4, 8, 16] {
            print!("{:>8.4}", aggregate_metric(&report, policy, b, "needle_accuracy").unwrap());
        }
        println!();
    }
}
