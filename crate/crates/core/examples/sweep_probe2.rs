use maskkv_core::harness::tasks::{needle_task, needle_position};
use maskkv_core::model::*;
use maskkv_core::eviction::SelectionPolicy;
use maskkv_core::scoring::MaskSegment;

fn main() {
    let config = ModelConfig::new(4, 4, 32, 64, 20250810);
    let params = init_model(&config).unwrap();
    for seed in 1..=6u64 {
        let (prompt, _) = needle_task(seed, 64, 0.5, 64);
        let npos = needle_position(&prompt).unwrap();
        let result = decode(&params, &prompt, 8, &DecodeOptions::default()).unwrap();
        // Stage-1 importance: where does the needle rank per (layer, head)?
        let steps = required_steps(8, &RemaskPolicy::default());
        let state = DenoisingState::initial(&config, &prompt, 8, steps).unwrap();
        let out = forward_step(&params, &state, CacheMode::Off, false).unwrap();
        let grid = stage1_importance(&out, &state.masked_positions(), 64,
            SelectionPolicy::MaskVoting(MaskSegment::All)).unwrap();
        let mut ranks = Vec::new();
        for layer in &grid.scores {
            for head in layer {
                let rank = head.iter().filter(|&&s| s > head[npos]).count();
                ranks.push(rank);
            }
        }
        println!("seed {seed}: needle@{npos} resp={:?} needle_ranks(of 64)={:?}",
            result.response_tokens(), ranks);
    }
}
