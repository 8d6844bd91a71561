//! Denoising state and the block-wise confidence remasking policy.

use std::collections::BTreeMap;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::math::softmax;

/// Which tokens to commit each step: within the earliest block that still
/// holds masks, the `ceil(transfer_ratio * remaining)` most confident
/// positions are decoded; confidence is the maximum softmax probability over
/// non-mask tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct RemaskPolicy {
    /// Fraction of the block's remaining masks committed per step, in (0, 1].
    pub transfer_ratio: f64,
    /// Response positions per semi-autoregressive block.
    pub block_length: usize,
}

impl Default for RemaskPolicy {
    fn default() -> Self {
        RemaskPolicy { transfer_ratio: 0.25, block_length: 8 }
    }
}

impl RemaskPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.transfer_ratio > 0.0 && self.transfer_ratio <= 1.0) {
            return Err(Error::config(format!(
                "transfer_ratio {} outside (0, 1]",
                self.transfer_ratio
            )));
        }
        if self.block_length == 0 {
            return Err(Error::config("block_length must be >= 1"));
        }
        Ok(())
    }
}

/// Steps the policy needs to fully decode `gen_len` positions, found by
/// simulating the per-block schedule.
pub fn required_steps(gen_len: usize, policy: &RemaskPolicy) -> usize {
    let mut steps = 0;
    let mut offset = 0;
    while offset < gen_len {
        let mut remaining = policy.block_length.min(gen_len - offset);
        offset += remaining;
        while remaining > 0 {
            let decoded = ((policy.transfer_ratio * remaining as f64).ceil() as usize).max(1);
            remaining -= decoded.min(remaining);
            steps += 1;
        }
    }
    steps
}

/// The full token sequence at one denoising step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenoisingState {
    tokens: Vec<u32>,
    prompt_len: usize,
    gen_len: usize,
    step: usize,
    masked: Vec<bool>,
    mask_token: u32,
}

impl DenoisingState {
    /// Fully masked initial state at countdown step `num_steps`.
    pub fn initial(
        config: &ModelConfig,
        prompt: &[u32],
        gen_len: usize,
        num_steps: usize,
    ) -> Result<Self> {
        if prompt.is_empty() {
            return Err(Error::config("prompt must be nonempty"));
        }
        if gen_len == 0 {
            return Err(Error::config("gen_len must be >= 1"));
        }
        let mask = config.mask_token();
        if prompt.iter().any(|&t| t >= config.vocab_size) {
            return Err(Error::config("prompt token outside vocabulary"));
        }
        if prompt.iter().any(|&t| t == mask) {
            return Err(Error::config("prompt must not contain the mask token"));
        }
        let mut tokens = prompt.to_vec();
        tokens.extend(std::iter::repeat(mask).take(gen_len));
        let mut masked = vec![false; prompt.len() + gen_len];
        for flag in masked.iter_mut().skip(prompt.len()) {
            *flag = true;
        }
        Ok(DenoisingState {
            tokens,
            prompt_len: prompt.len(),
            gen_len,
            step: num_steps,
            masked,
            mask_token: mask,
        })
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn gen_len(&self) -> usize {
        self.gen_len
    }

    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    /// Countdown step; the run finishes at 0.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn mask_token(&self) -> u32 {
        self.mask_token
    }

    pub fn is_masked(&self, pos: usize) -> bool {
        self.masked[pos]
    }

    /// Masked positions in ascending order.
    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.tokens.len()).filter(|&p| self.masked[p]).collect()
    }

    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|m| **m).count()
    }

    /// Response positions (decoded or not) in ascending order.
    pub fn response_positions(&self) -> Vec<usize> {
        (self.prompt_len..self.tokens.len()).collect()
    }

    pub fn prompt_positions(&self) -> Vec<usize> {
        (0..self.prompt_len).collect()
    }

    pub fn response_tokens(&self) -> &[u32] {
        &self.tokens[self.prompt_len..]
    }
}

/// Argmax over non-mask tokens; ties break to the lower token id.
fn best_token(logits: &[f64], mask_token: u32) -> (u32, f64) {
    let probs = softmax(logits);
    let mut best = 0u32;
    let mut best_p = f64::NEG_INFINITY;
    for (id, &p) in probs.iter().enumerate() {
        if id as u32 == mask_token {
            continue;
        }
        if p > best_p {
            best_p = p;
            best = id as u32;
        }
    }
    (best, best_p)
}

/// Commit the most confident masked positions of the active block and
/// decrement the step counter.
pub fn remask(
    state: &DenoisingState,
    logits: &BTreeMap<usize, Vec<f64>>,
    policy: &RemaskPolicy,
) -> Result<DenoisingState> {
    policy.validate()?;
    if state.step == 0 {
        return Err(Error::Protocol("remask called at step 0".into()));
    }
    let masked = state.masked_positions();
    if masked.is_empty() {
        return Err(Error::Protocol("remask called with empty mask set".into()));
    }
    for &pos in &masked {
        if !logits.contains_key(&pos) {
            return Err(Error::Protocol(format!("logits missing for masked position {pos}")));
        }
    }

    // Earliest block that still holds masks; earlier blocks are fully decoded.
    let first_masked = masked[0];
    let block_index = (first_masked - state.prompt_len) / policy.block_length;
    let block_start = state.prompt_len + block_index * policy.block_length;
    let block_end = (block_start + policy.block_length).min(state.tokens.len());
    let in_block: Vec<usize> =
        masked.iter().copied().filter(|&p| p >= block_start && p < block_end).collect();

    let decode_count =
        ((policy.transfer_ratio * in_block.len() as f64).ceil() as usize).clamp(1, in_block.len());

    let mut candidates: Vec<(usize, u32, f64)> = in_block
        .iter()
        .map(|&pos| {
            let (token, confidence) = best_token(&logits[&pos], state.mask_token);
            (pos, token, confidence)
        })
        .collect();
    candidates.sort_by(|a, b| {
        b.2.partial_cmp(&a.2).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0))
    });

    let mut next = state.clone();
    for &(pos, token, _) in candidates.iter().take(decode_count) {
        next.tokens[pos] = token;
        next.masked[pos] = false;
    }
    next.step -= 1;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> ModelConfig {
        ModelConfig::new(1, 1, 4, 8, 7)
    }

    fn state_with(gen_len: usize, steps: usize) -> DenoisingState {
        DenoisingState::initial(&config(), &[1, 2, 3], gen_len, steps).unwrap()
    }

    /// Logits putting all weight on `token`, with `margin` controlling how
    /// confident the row is.
    fn peaked(vocab: usize, token: usize, margin: f64) -> Vec<f64> {
        let mut row = vec![0.0; vocab];
        row[token] = margin;
        row
    }

    #[test]
    fn initial_state_masks_exactly_the_response() {
        let s = state_with(4, 5);
        assert_eq!(s.seq_len(), 7);
        assert_eq!(s.masked_positions(), vec![3, 4, 5, 6]);
        assert_eq!(s.tokens()[3], config().mask_token());
        assert_eq!(s.step(), 5);
    }

    #[test]
    fn prompt_containing_mask_is_rejected() {
        let mask = config().mask_token();
        let err = DenoisingState::initial(&config(), &[1, mask], 2, 2).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn quarter_ratio_decodes_the_single_most_confident() {
        let s = state_with(4, 6);
        let policy = RemaskPolicy { transfer_ratio: 0.25, block_length: 8 };
        let mut logits = BTreeMap::new();
        logits.insert(3, peaked(8, 1, 1.0));
        logits.insert(4, peaked(8, 2, 9.0)); // most confident
        logits.insert(5, peaked(8, 3, 1.0));
        logits.insert(6, peaked(8, 4, 1.0));
        let next = remask(&s, &logits, &policy).unwrap();
        assert_eq!(next.masked_count(), 3);
        assert!(!next.is_masked(4));
        assert_eq!(next.tokens()[4], 2);
        assert_eq!(next.step(), 5);
    }

    #[test]
    fn full_ratio_decodes_whole_active_block() {
        let s = state_with(4, 1);
        let policy = RemaskPolicy { transfer_ratio: 1.0, block_length: 8 };
        let mut logits = BTreeMap::new();
        for (i, pos) in [3usize, 4, 5, 6].iter().enumerate() {
            logits.insert(*pos, peaked(8, i + 1, 2.0));
        }
        let next = remask(&s, &logits, &policy).unwrap();
        assert_eq!(next.masked_count(), 0);
        assert_eq!(next.response_tokens(), &[1, 2, 3, 4]);
    }

    #[test]
    fn confidence_tie_decodes_lower_position() {
        let s = state_with(4, 6);
        let policy = RemaskPolicy { transfer_ratio: 0.25, block_length: 8 };
        let mut logits = BTreeMap::new();
        for pos in [3usize, 4, 5, 6] {
            logits.insert(pos, peaked(8, 2, 3.0));
        }
        let next = remask(&s, &logits, &policy).unwrap();
        assert!(!next.is_masked(3));
        assert!(next.is_masked(4));
    }

    #[test]
    fn earlier_blocks_decode_before_later_ones() {
        let s = state_with(4, 6);
        let policy = RemaskPolicy { transfer_ratio: 0.5, block_length: 2 };
        let mut logits = BTreeMap::new();
        logits.insert(3, peaked(8, 1, 1.0));
        logits.insert(4, peaked(8, 2, 1.0));
        logits.insert(5, peaked(8, 3, 99.0)); // outside the active block
        logits.insert(6, peaked(8, 4, 99.0));
        let next = remask(&s, &logits, &policy).unwrap();
        // Active block is positions 3..5; the later block stays masked even
        // though its confidence is higher.
        assert!(next.is_masked(5));
        assert!(next.is_masked(6));
        assert_eq!(next.masked_count(), 3);
    }

    #[test]
    fn missing_logits_is_protocol_error() {
        let s = state_with(2, 3);
        let policy = RemaskPolicy::default();
        let mut logits = BTreeMap::new();
        logits.insert(3, peaked(8, 1, 1.0));
        let err = remask(&s, &logits, &policy).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
    }

    #[test]
    fn mask_token_is_never_committed() {
        let s = state_with(1, 1);
        let policy = RemaskPolicy { transfer_ratio: 1.0, block_length: 8 };
        let mut logits = BTreeMap::new();
        // Mask token has by far the largest logit; runner-up is token 5.
        let mut row = vec![0.0; 8];
        row[7] = 50.0;
        row[5] = 1.0;
        logits.insert(3, row);
        let next = remask(&s, &logits, &policy).unwrap();
        assert_eq!(next.tokens()[3], 5);
    }

    #[test]
    fn schedule_length_matches_simulation() {
        let policy = RemaskPolicy { transfer_ratio: 0.25, block_length: 8 };
        // 8 -> decode 2,2,1,1,1,1 = 6 steps.
        assert_eq!(required_steps(8, &policy), 6);
        let all = RemaskPolicy { transfer_ratio: 1.0, block_length: 4 };
        assert_eq!(required_steps(8, &all), 2);
        assert_eq!(required_steps(1, &RemaskPolicy::default()), 1);
    }
}
