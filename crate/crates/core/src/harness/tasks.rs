//! Toy task generators.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Token id planted as the needle. Filler tokens start above it so the
/// needle appears exactly once per prompt.
pub const NEEDLE_TOKEN: u32 = 1;

/// First filler token id.
const FILLER_BASE: u32 = 2;

/// Random filler prompt with one distinguished needle token planted at
/// `floor(depth * prompt_len)`, clamped to the last position. Returns the
/// prompt and the expected answer token. Fillers come from
/// `[2, vocab_size - 2]`, leaving the needle id and the mask id reserved.
pub fn needle_task(seed: u64, prompt_len: usize, needle_depth: f64, vocab_size: u32) -> (Vec<u32>, u32) {
    assert!(prompt_len >= 1, "needle_task needs a nonempty prompt");
    assert!((0.0..=1.0).contains(&needle_depth), "depth must lie in [0, 1]");
    assert!(vocab_size >= 4, "needle_task needs room for needle, filler, and mask ids");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let filler_top = vocab_size - 1; // exclusive; vocab_size - 1 is the mask id
    let mut prompt: Vec<u32> =
        (0..prompt_len).map(|_| rng.gen_range(FILLER_BASE..filler_top)).collect();
    let pos = ((needle_depth * prompt_len as f64).floor() as usize).min(prompt_len - 1);
    prompt[pos] = NEEDLE_TOKEN;
    (prompt, NEEDLE_TOKEN)
}

/// Position of the needle inside a prompt produced by [`needle_task`].
pub fn needle_position(prompt: &[u32]) -> Option<usize> {
    prompt.iter().position(|&t| t == NEEDLE_TOKEN)
}

/// Plain filler prompt without a needle, for calibration runs.
pub fn random_prompt(seed: u64, prompt_len: usize, vocab_size: u32) -> Vec<u32> {
    assert!(prompt_len >= 1 && vocab_size >= 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..prompt_len).map(|_| rng.gen_range(FILLER_BASE..vocab_size - 1)).collect()
}
